//! Evaluation protocol: fixed test split, k-shot or fractional support folds,
//! per-class metrics and cross-domain transfer.

pub mod metrics;
pub mod splits;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{metric_aca, metric_auc, metric_quadratic_kappa, per_class_accuracy};
pub use splits::{make_splits, test_indices, Fold, Regime, SplitPlan};
pub use synth::{synth_dataset, synth_prompts, Dataset, SynthDataset, SynthPrompts};

use crate::adapters::{fit_adapter, AdapterConfig, AdapterContext, AdapterMethod};
use crate::error::{Error, Result};
use crate::prompt_bank::Category;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multiclass,
    /// Graded labels; adds quadratic kappa.
    Ordinal,
    /// Two classes; adds AUC on the class-1 probability.
    Binary,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(Task::Multiclass),
            "ordinal" => Ok(Task::Ordinal),
            "binary" => Ok(Task::Binary),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Predictions for one fold's test set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldPredictions {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    /// Class-1 probability per sample, required for binary tasks.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub aca: f64,
    pub per_class: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub aca: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

/// Fold-averaged metrics with per-fold detail. `std` is the population
/// standard deviation across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aca: f64,
    pub per_class: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    pub folds: Vec<FoldMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

pub fn evaluate_fold(task: Task, categories: &[Category], preds: &FoldPredictions) -> Result<FoldMetrics> {
    let per = per_class_accuracy(&preds.y_true, &preds.y_pred)?;
    let mut per_class = BTreeMap::new();
    for (&c, &acc) in &per {
        let name = categories
            .get(c)
            .ok_or_else(|| Error::Validation(format!("label {c} outside {} categories", categories.len())))?;
        per_class.insert(name.name.clone(), acc);
    }
    let aca = per.values().sum::<f64>() / per.len() as f64;
    let kappa = match task {
        Task::Ordinal => Some(metric_quadratic_kappa(&preds.y_true, &preds.y_pred, categories.len())?),
        _ => None,
    };
    let auc = match task {
        Task::Binary => {
            if categories.len() != 2 {
                return Err(Error::Config(format!("binary task with {} categories", categories.len())));
            }
            let scores = preds
                .scores
                .as_ref()
                .ok_or_else(|| Error::Validation("binary task needs class-1 scores".into()))?;
            let positive: Vec<bool> = preds.y_true.iter().map(|&y| y == 1).collect();
            Some(metric_auc(&positive, scores)?)
        }
        _ => None,
    };
    Ok(FoldMetrics {
        aca,
        per_class,
        kappa,
        auc,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn optional_stat(folds: &[FoldMetrics], pick: impl Fn(&FoldMetrics) -> Option<f64>) -> Option<(f64, f64)> {
    let values: Option<Vec<f64>> = folds.iter().map(pick).collect();
    values.map(|v| mean_std(&v))
}

pub fn aggregate(folds: Vec<FoldMetrics>) -> Result<EvalReport> {
    if folds.is_empty() {
        return Err(Error::Validation("no folds to aggregate".into()));
    }
    let acas: Vec<f64> = folds.iter().map(|f| f.aca).collect();
    let (aca_mean, aca_std) = mean_std(&acas);
    let kappa = optional_stat(&folds, |f| f.kappa);
    let auc = optional_stat(&folds, |f| f.auc);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for f in &folds {
        for (k, v) in &f.per_class {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(EvalReport {
        aca: aca_mean,
        per_class: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        kappa: kappa.map(|k| k.0),
        auc: auc.map(|a| a.0),
        mean: MetricSummary {
            aca: aca_mean,
            kappa: kappa.map(|k| k.0),
            auc: auc.map(|a| a.0),
        },
        std: MetricSummary {
            aca: aca_std,
            kappa: kappa.map(|k| k.1),
            auc: auc.map(|a| a.1),
        },
        folds,
    })
}

/// Seed handed to an adapter fitted on fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ ((fold as u64 + 1) << 32)
}

/// Fits on the `support` rows of `train` and predicts the selected rows of each target.
fn fit_and_predict(
    method: AdapterMethod,
    ctx: AdapterContext<'_>,
    config: &AdapterConfig,
    train: &Dataset,
    support: &[usize],
    targets: &[(&Dataset, &[usize])],
    seed: u64,
) -> Result<Vec<FoldPredictions>> {
    let mut cfg = *config;
    cfg.fit.seed = seed;
    let x = train.features.select(Axis(0), support);
    let y: Vec<usize> = support.iter().map(|&i| train.labels[i]).collect();
    let fitted = fit_adapter(method, ctx, &x, &y, train.categories.len(), &cfg)?;
    targets
        .iter()
        .map(|(data, idx)| {
            let rows = data.features.select(Axis(0), idx);
            let out = fitted.predict_rows(ctx, &rows)?;
            Ok(FoldPredictions {
                y_true: idx.iter().map(|&i| data.labels[i]).collect(),
                y_pred: out.iter().map(|o| o.0).collect(),
                scores: (data.categories.len() == 2).then(|| out.iter().map(|o| o.1[1]).collect()),
            })
        })
        .collect()
}

/// Fits one adapter per fold and evaluates it on the shared test set. Folds
/// run in parallel and give the same report as a serial run.
pub fn run_protocol(
    method: AdapterMethod,
    ctx: AdapterContext<'_>,
    config: &AdapterConfig,
    data: &Dataset,
    plan: &SplitPlan,
    task: Task,
) -> Result<EvalReport> {
    let folds = make_splits(&data.labels, &data.categories, plan)?;
    let metrics: Result<Vec<FoldMetrics>> = folds
        .par_iter()
        .map(|f| {
            let preds = fit_and_predict(
                method,
                ctx,
                config,
                data,
                &f.support,
                &[(data, &f.test)],
                fold_seed(plan.seed, f.fold),
            )?;
            evaluate_fold(task, &data.categories, &preds[0])
        })
        .collect();
    aggregate(metrics?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    /// Fitted and tested on A.
    pub in_domain: EvalReport,
    /// Fitted on A, tested on B.
    pub cross_domain: EvalReport,
    /// Zero-shot on A's and B's test sets, present when prototypes are available.
    pub zero_shot_in: Option<EvalReport>,
    pub zero_shot_cross: Option<EvalReport>,
}

/// Re-expresses `b`'s labels in `a`'s category order.
fn align_vocabulary(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let names_a: BTreeSet<&str> = a.categories.iter().map(|c| c.name.as_str()).collect();
    let names_b: BTreeSet<&str> = b.categories.iter().map(|c| c.name.as_str()).collect();
    let unshared: Vec<&str> = names_a.symmetric_difference(&names_b).copied().collect();
    if !unshared.is_empty() {
        return Err(Error::Validation(format!("vocabularies differ; unshared classes: {unshared:?}")));
    }
    let to_a: Vec<usize> = b
        .categories
        .iter()
        .map(|c| a.categories.iter().position(|x| x.name == c.name).expect("shared name"))
        .collect();
    Dataset::new(
        b.features.clone(),
        b.labels.iter().map(|&y| to_a[y]).collect(),
        a.categories.clone(),
    )
}

/// Fits on A's support folds and tests on A's and B's fixed test sets.
pub fn cross_domain_eval(
    method: AdapterMethod,
    ctx: AdapterContext<'_>,
    config: &AdapterConfig,
    a: &Dataset,
    b: &Dataset,
    plan: &SplitPlan,
    task: Task,
) -> Result<CrossDomainReport> {
    let b = align_vocabulary(a, b)?;
    let folds = make_splits(&a.labels, &a.categories, plan)?;
    let test_b = test_indices(&b.labels, b.categories.len(), plan.test_fraction, plan.seed)?;
    let run = |method: AdapterMethod| -> Result<(EvalReport, EvalReport)> {
        let pairs: Result<Vec<(FoldMetrics, FoldMetrics)>> = folds
            .par_iter()
            .map(|f| {
                let preds = fit_and_predict(
                    method,
                    ctx,
                    config,
                    a,
                    &f.support,
                    &[(a, &f.test), (&b, &test_b)],
                    fold_seed(plan.seed, f.fold),
                )?;
                Ok((
                    evaluate_fold(task, &a.categories, &preds[0])?,
                    evaluate_fold(task, &a.categories, &preds[1])?,
                ))
            })
            .collect();
        let (ins, outs): (Vec<_>, Vec<_>) = pairs?.into_iter().unzip();
        Ok((aggregate(ins)?, aggregate(outs)?))
    };
    let (in_domain, cross_domain) = run(method)?;
    let (zero_shot_in, zero_shot_cross) = if ctx.prototypes.is_empty() {
        (None, None)
    } else if method == AdapterMethod::ZeroShot {
        (Some(in_domain.clone()), Some(cross_domain.clone()))
    } else {
        let (i, c) = run(AdapterMethod::ZeroShot)?;
        (Some(i), Some(c))
    };
    Ok(CrossDomainReport {
        in_domain,
        cross_domain,
        zero_shot_in,
        zero_shot_cross,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ModelState, ProjectionHead};
    use crate::zeroshot::{class_prototypes, PromptMode};

    fn identity_model(dim: usize) -> ModelState {
        ModelState::new(ProjectionHead::identity(dim), ProjectionHead::identity(dim), 0.0).unwrap()
    }

    #[test]
    fn aggregate_mean_is_arithmetic_mean() {
        let mk = |aca: f64, k: f64| FoldMetrics {
            aca,
            per_class: BTreeMap::from([("a".to_string(), aca)]),
            kappa: Some(k),
            auc: None,
        };
        let r = aggregate(vec![mk(0.5, 0.1), mk(0.7, 0.3), mk(0.9, -0.1)]).unwrap();
        assert!((r.aca - 0.7).abs() < 1e-12);
        assert!((r.mean.kappa.unwrap() - 0.1).abs() < 1e-12);
        assert!((r.std.aca - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(r.auc.is_none());
        let json = serde_json::to_value(&r).unwrap();
        for key in ["aca", "per_class", "kappa", "folds", "mean", "std"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(json.get("auc").is_none());
    }

    #[test]
    fn evaluate_binary_fold() {
        let cats = Category::vocabulary(&["neg", "pos"]);
        let preds = FoldPredictions {
            y_true: vec![0, 0, 1, 1],
            y_pred: vec![0, 1, 1, 1],
            scores: Some(vec![0.1, 0.6, 0.7, 0.9]),
        };
        let m = evaluate_fold(Task::Binary, &cats, &preds).unwrap();
        assert_eq!(m.per_class["neg"], 0.5);
        assert_eq!(m.aca, 0.75);
        assert_eq!(m.auc, Some(1.0));
        assert!(evaluate_fold(Task::Binary, &cats, &FoldPredictions { scores: None, ..preds }).is_err());
    }

    #[test]
    fn same_domain_reports_identical() {
        let ds = synth_dataset(3, 20, 6, 3.0, 0.5, 1).unwrap();
        let model = identity_model(6);
        let plan = SplitPlan {
            folds: 2,
            ..SplitPlan::new(Regime::Shots(2), 3)
        };
        let r = cross_domain_eval(
            AdapterMethod::Lp,
            AdapterContext { model: &model, prototypes: &[] },
            &AdapterConfig::default(),
            &ds.data,
            &ds.data,
            &plan,
            Task::Multiclass,
        )
        .unwrap();
        assert_eq!(r.in_domain, r.cross_domain);
        assert!(r.zero_shot_in.is_none());
    }

    #[test]
    fn zero_shot_ignores_support() {
        let ds = synth_dataset(3, 20, 6, 3.0, 0.5, 1).unwrap();
        let b = ds.rotated(0.7, 5);
        let sp = synth_prompts(&ds, 2, 0.1, 0).unwrap();
        let model = identity_model(6);
        let protos = class_prototypes(&sp.bank, &sp.featurizer, &model, &ds.data.categories, PromptMode::Ek).unwrap();
        let ctx = AdapterContext { model: &model, prototypes: &protos };
        let run = |k, seed| {
            let plan = SplitPlan { folds: 2, ..SplitPlan::new(Regime::Shots(k), seed) };
            cross_domain_eval(AdapterMethod::ZeroShot, ctx, &AdapterConfig::default(), &ds.data, &b.data, &plan, Task::Multiclass)
                .unwrap()
        };
        let (r1, r2) = (run(1, 4), run(5, 4));
        assert_eq!(r1.cross_domain, r2.cross_domain);
        assert_eq!(r1.zero_shot_cross.as_ref(), Some(&r1.cross_domain));
    }

    #[test]
    fn vocabulary_mismatch_lists_classes() {
        let a = synth_dataset(2, 5, 3, 1.0, 0.1, 0).unwrap().data;
        let mut b = a.clone();
        b.categories[1].name = "other".into();
        let model = identity_model(3);
        let e = cross_domain_eval(
            AdapterMethod::Lp,
            AdapterContext { model: &model, prototypes: &[] },
            &AdapterConfig::default(),
            &a,
            &b,
            &SplitPlan::new(Regime::Shots(1), 0),
            Task::Multiclass,
        )
        .unwrap_err();
        let m = e.to_string();
        assert!(m.contains("class_1") && m.contains("other"), "{m}");
    }

    #[test]
    fn rotation_shift_hurts_linear_probe() {
        let model = identity_model(8);
        for seed in 0..10 {
            let a = synth_dataset(4, 30, 8, 3.0, 0.6, seed).unwrap();
            let b = a.rotated(std::f64::consts::FRAC_PI_2, seed + 100);
            let plan = SplitPlan { folds: 2, ..SplitPlan::new(Regime::Shots(5), seed) };
            let r = cross_domain_eval(
                AdapterMethod::Lp,
                AdapterContext { model: &model, prototypes: &[] },
                &AdapterConfig::default(),
                &a.data,
                &b.data,
                &plan,
                Task::Multiclass,
            )
            .unwrap();
            assert!(r.in_domain.aca >= r.cross_domain.aca, "seed {seed}");
        }
    }

    #[test]
    fn protocol_runs_every_fold() {
        let ds = synth_dataset(3, 20, 5, 3.0, 0.3, 2).unwrap();
        let model = identity_model(5);
        let r = run_protocol(
            AdapterMethod::Lp,
            AdapterContext { model: &model, prototypes: &[] },
            &AdapterConfig::default(),
            &ds.data,
            &SplitPlan::new(Regime::Fraction(0.4), 1),
            Task::Ordinal,
        )
        .unwrap();
        assert_eq!(r.folds.len(), 5);
        let mean = r.folds.iter().map(|f| f.aca).sum::<f64>() / 5.0;
        assert!((r.aca - mean).abs() < 1e-12);
        assert!(r.kappa.is_some());
    }
}
