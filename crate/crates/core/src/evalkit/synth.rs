//! Gaussian class clusters with matching text directions, for desk-scale runs.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LookupFeaturizer, TripletRecord};
use crate::prompt_bank::{Category, PromptBank, DEFAULT_NAIVE_TEMPLATE};

/// Weight of the class-specific perturbation mixed into each text direction.
const TEXT_MIX: f64 = 0.5;

/// Labeled image features over a category vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub categories: Vec<Category>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, categories: Vec<Category>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= categories.len()) {
            return Err(Error::Validation(format!("label {bad} outside {} categories", categories.len())));
        }
        Ok(Dataset {
            features,
            labels,
            categories,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            categories: self.categories.clone(),
        }
    }

    /// Training records without raw text, so prompts are sampled from the bank.
    pub fn records(&self, indices: &[usize]) -> Vec<TripletRecord> {
        indices
            .iter()
            .map(|&i| TripletRecord {
                sample_id: format!("s{i}"),
                image_feature_index: i,
                label: self.labels[i],
                raw_text: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub data: Dataset,
    /// One row per class.
    pub centers: Array2<f64>,
    /// Unit text direction per class, correlated with the center direction.
    pub class_text: Array2<f64>,
    pub noise: f64,
    pub n_per_class: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Unit directions, mutually orthogonal when `n <= dim`.
fn class_directions(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Array2<f64> {
    let mut dirs = Array2::zeros((n, dim));
    for c in 0..n {
        let mut v = gaussian(rng, dim);
        if c < dim {
            for prev in 0..c {
                let p = dirs.row(prev).to_owned();
                v = &v - &(&p * p.dot(&v));
            }
        }
        dirs.row_mut(c).assign(&unit(v));
    }
    dirs
}

fn sample_clusters(centers: &Array2<f64>, n_per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let (n_classes, dim) = centers.dim();
    let mut features = Array2::zeros((n_classes * n_per_class, dim));
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        for k in 0..n_per_class {
            let row = centers.row(c).to_owned() + gaussian(rng, dim) * noise;
            features.row_mut(c * n_per_class + k).assign(&row);
            labels.push(c);
        }
    }
    (features, labels)
}

/// Image features are `center + noise * N(0, I)`; class `c` is named `class_c`.
pub fn synth_dataset(
    n_classes: usize,
    n_per_class: usize,
    feature_dim: usize,
    class_separation: f64,
    noise: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if n_classes == 0 || n_per_class == 0 || feature_dim == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(class_separation > 0.0 && class_separation.is_finite() && noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("separation must be positive and noise nonnegative".into()));
    }
    let dirs = class_directions(&mut rng_for(seed, 0), n_classes, feature_dim);
    let centers = &dirs * class_separation;
    let (features, labels) = sample_clusters(&centers, n_per_class, noise, &mut rng_for(seed, 1));

    let mut text_rng = rng_for(seed, 2);
    let mut class_text = Array2::zeros((n_classes, feature_dim));
    for c in 0..n_classes {
        let z = gaussian(&mut text_rng, feature_dim) / (feature_dim as f64).sqrt();
        class_text.row_mut(c).assign(&unit(dirs.row(c).to_owned() + z * TEXT_MIX));
    }

    let names: Vec<String> = (0..n_classes).map(|c| format!("class_{c}")).collect();
    Ok(SynthDataset {
        data: Dataset {
            features,
            labels,
            categories: Category::vocabulary(&names),
        },
        centers,
        class_text,
        noise,
        n_per_class,
    })
}

impl SynthDataset {
    /// Fresh samples around centers rotated by `angle` in each coordinate pair,
    /// sharing the class vocabulary and text directions.
    pub fn rotated(&self, angle: f64, seed: u64) -> SynthDataset {
        let mut centers = self.centers.clone();
        let (cos, sin) = (angle.cos(), angle.sin());
        let dim = centers.ncols();
        for mut row in centers.axis_iter_mut(Axis(0)) {
            for k in (0..dim.saturating_sub(1)).step_by(2) {
                let (a, b) = (row[k], row[k + 1]);
                row[k] = cos * a - sin * b;
                row[k + 1] = sin * a + cos * b;
            }
        }
        let (features, labels) = sample_clusters(&centers, self.n_per_class, self.noise, &mut rng_for(seed, 1));
        SynthDataset {
            data: Dataset {
                features,
                labels,
                categories: self.data.categories.clone(),
            },
            centers,
            class_text: self.class_text.clone(),
            noise: self.noise,
            n_per_class: self.n_per_class,
        }
    }

    /// Index of the nearest class center for each sample.
    pub fn nearest_center(&self) -> Vec<usize> {
        self.data
            .features
            .axis_iter(Axis(0))
            .map(|x| {
                let mut best = (0, f64::INFINITY);
                for (c, center) in self.centers.axis_iter(Axis(0)).enumerate() {
                    let d = (&x - &center).mapv(|v| v * v).sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect()
    }
}

/// A prompt bank over the synthetic classes plus the text table backing it.
#[derive(Debug, Clone)]
pub struct SynthPrompts {
    pub bank: PromptBank,
    pub featurizer: LookupFeaturizer,
}

/// Every prompt, naive or descriptive, maps to its class text direction plus
/// independent noise of expected norm `prompt_noise`.
pub fn synth_prompts(ds: &SynthDataset, prompts_per_class: usize, prompt_noise: f64, seed: u64) -> Result<SynthPrompts> {
    if prompts_per_class == 0 {
        return Err(Error::Config("at least one prompt per class".into()));
    }
    let dim = ds.class_text.ncols();
    let mut rng = rng_for(seed, 3);
    let mut featurizer = LookupFeaturizer::new(dim);
    let mut entries = Vec::with_capacity(ds.data.categories.len());
    let template = DEFAULT_NAIVE_TEMPLATE;
    for c in &ds.data.categories {
        let base = ds.class_text.slice(s![c.id, ..]).to_owned();
        let noisy = |rng: &mut ChaCha8Rng| &base + &(gaussian(rng, dim) * (prompt_noise / (dim as f64).sqrt()));
        featurizer.insert(template.replace("[CLS]", &c.name), noisy(&mut rng))?;
        let descriptions: Vec<String> = (0..prompts_per_class).map(|j| format!("{} finding {j}", c.name)).collect();
        for d in &descriptions {
            featurizer.insert(d.clone(), noisy(&mut rng))?;
        }
        entries.push((c.name.clone(), descriptions));
    }
    Ok(SynthPrompts {
        bank: PromptBank::new(template, entries)?,
        featurizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::TextFeaturizer;
    use crate::prompt_bank::CLS_TOKEN;

    #[test]
    fn noiseless_samples_coincide() {
        let ds = synth_dataset(3, 5, 4, 2.0, 0.0, 1).unwrap();
        for (i, &y) in ds.data.labels.iter().enumerate() {
            assert_eq!(ds.data.features.row(i), ds.centers.row(y));
        }
    }

    #[test]
    fn well_separated_is_nearest_center_perfect() {
        let ds = synth_dataset(5, 40, 16, 10.0, 0.3, 7).unwrap();
        assert_eq!(ds.nearest_center(), ds.data.labels);
    }

    #[test]
    fn seeded() {
        let a = synth_dataset(4, 10, 8, 3.0, 0.5, 3).unwrap();
        assert_eq!(a, synth_dataset(4, 10, 8, 3.0, 0.5, 3).unwrap());
        assert_ne!(a.data.features, synth_dataset(4, 10, 8, 3.0, 0.5, 4).unwrap().data.features);
    }

    #[test]
    fn text_directions_correlated_but_distinct() {
        let ds = synth_dataset(4, 1, 16, 1.0, 0.0, 2).unwrap();
        for c in 0..4 {
            let t = ds.class_text.row(c);
            assert!((t.dot(&t) - 1.0).abs() < 1e-12);
            let own = t.dot(&ds.centers.row(c));
            for o in (0..4).filter(|&o| o != c) {
                assert!(own > t.dot(&ds.centers.row(o)));
            }
        }
    }

    #[test]
    fn rotation_preserves_center_norms() {
        let ds = synth_dataset(3, 4, 6, 2.0, 0.1, 0).unwrap();
        let r = ds.rotated(1.0, 9);
        for c in 0..3 {
            let a = ds.centers.row(c).dot(&ds.centers.row(c));
            let b = r.centers.row(c).dot(&r.centers.row(c));
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.data.categories, ds.data.categories);
        assert_ne!(r.centers, ds.centers);
    }

    #[test]
    fn prompts_cover_bank() {
        let ds = synth_dataset(3, 2, 8, 1.0, 0.1, 0).unwrap();
        let sp = synth_prompts(&ds, 3, 0.2, 5).unwrap();
        assert_eq!(sp.featurizer.len(), 3 * 4);
        for c in &ds.data.categories {
            assert!(sp.featurizer.featurize(&sp.bank.naive_prompt(c)).is_ok());
            assert_eq!(sp.bank.ek_prompts(c).unwrap().len(), 3);
            for p in sp.bank.ek_prompts(c).unwrap() {
                assert!(sp.featurizer.featurize(p).is_ok());
            }
        }
        assert!(sp.bank.naive_template().contains(CLS_TOKEN));
    }
}
