//! Fixed stratified test split and per-fold support sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_bank::Category;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `k` samples per class.
    Shots(usize),
    /// Fraction of the train pool, stratified by class.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fraction: f64,
    pub regime: Regime,
    pub folds: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(regime: Regime, seed: u64) -> Self {
        SplitPlan {
            test_fraction: 0.2,
            regime,
            folds: 5,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.folds == 0 {
            return Err(Error::Config("at least one fold is required".into()));
        }
        match self.regime {
            Regime::Shots(0) => Err(Error::Config("shots must be positive".into())),
            Regime::Fraction(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("support fraction {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold: usize,
    /// Sorted ascending.
    pub support: Vec<usize>,
    /// Sorted ascending; identical for every fold of a plan.
    pub test: Vec<usize>,
}

/// Splits `total` into integer parts proportional to `sizes`, largest remainder first.
pub(crate) fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - parts[b] as f64).total_cmp(&(exact[a] - parts[a] as f64)).then(a.cmp(&b)));
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if parts[c] < sizes[c] {
            parts[c] += 1;
            left -= 1;
        }
    }
    parts
}

fn by_class(labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        groups
            .get_mut(y)
            .ok_or_else(|| Error::Validation(format!("label {y} at sample {i} outside {n_classes} classes")))?
            .push(i);
    }
    Ok(groups)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Test indices depend only on the labels, the test fraction and the seed.
pub fn test_indices(labels: &[usize], n_classes: usize, test_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let groups = by_class(labels, n_classes)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let total = (test_fraction * labels.len() as f64).round() as usize;
    let mut rng = rng_for(seed, 0);
    let mut test = Vec::with_capacity(total);
    for (mut g, take) in groups.into_iter().zip(apportion(&sizes, total)) {
        g.shuffle(&mut rng);
        test.extend_from_slice(&g[..take]);
    }
    test.sort_unstable();
    Ok(test)
}

/// One `(support, test)` pair per fold; support for fold `f` is seeded by `(plan.seed, f)`.
pub fn make_splits(labels: &[usize], categories: &[Category], plan: &SplitPlan) -> Result<Vec<Fold>> {
    plan.validate()?;
    if labels.is_empty() {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    let n_classes = categories.len();
    let test = test_indices(labels, n_classes, plan.test_fraction, plan.seed)?;
    let mut in_test = vec![false; labels.len()];
    for &i in &test {
        in_test[i] = true;
    }
    let pool: Vec<Vec<usize>> = by_class(labels, n_classes)?
        .into_iter()
        .map(|g| g.into_iter().filter(|&i| !in_test[i]).collect())
        .collect();
    let pool_sizes: Vec<usize> = pool.iter().map(Vec::len).collect();
    let takes = match plan.regime {
        Regime::Shots(k) => {
            for (c, &n) in pool_sizes.iter().enumerate() {
                if n < k {
                    return Err(Error::Validation(format!(
                        "class `{}` has {n} training samples, fewer than {k} shots",
                        categories[c].name
                    )));
                }
            }
            vec![k; n_classes]
        }
        Regime::Fraction(p) => {
            let total = (p * pool_sizes.iter().sum::<usize>() as f64).round() as usize;
            apportion(&pool_sizes, total)
        }
    };
    Ok((0..plan.folds)
        .map(|fold| {
            let mut rng = rng_for(plan.seed, fold as u64 + 1);
            let mut support = Vec::new();
            for (g, &take) in pool.iter().zip(&takes) {
                let mut g = g.clone();
                g.shuffle(&mut rng);
                support.extend_from_slice(&g[..take]);
            }
            support.sort_unstable();
            Fold {
                fold,
                support,
                test: test.clone(),
            }
        })
        .collect())
}
