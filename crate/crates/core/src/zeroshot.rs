//! Zero-shot classification from text prototypes.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{JointEmbedding, ModelState};
use crate::error::{Error, Result};
use crate::io::TextFeaturizer;
use crate::prompt_bank::{Category, PromptBank};

/// Which prompts build each class prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// The single templated prompt.
    Naive,
    /// Centroid of the category's expert-knowledge descriptions.
    Ek,
    /// Two classes described by the bare words "normal" and "disease".
    Anomaly,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PromptMode::Naive),
            "ek" => Ok(PromptMode::Ek),
            "anomaly" => Ok(PromptMode::Anomaly),
            other => Err(Error::Config(format!("unknown prompt mode `{other}`"))),
        }
    }
}

pub const ANOMALY_PROMPTS: [&str; 2] = ["normal", "disease"];

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub category: Category,
    pub embedding: JointEmbedding,
    pub prompt_count: usize,
}

/// Renormalized mean of the unit embeddings of `prompts`.
pub fn prompt_centroid(
    model: &ModelState,
    featurizer: &dyn TextFeaturizer,
    prompts: &[impl AsRef<str>],
) -> Result<JointEmbedding> {
    if prompts.is_empty() {
        return Err(Error::Validation("no prompts for centroid".into()));
    }
    let mut sum = Array1::zeros(model.d_joint());
    for p in prompts {
        let feature = featurizer.featurize(p.as_ref())?;
        sum += model.embed_text(feature.view())?.as_array();
    }
    JointEmbedding::normalize(sum / prompts.len() as f64)
        .map_err(|_| Error::numerical("prompt embeddings cancel out: centroid has zero norm"))
}

pub fn class_prototypes(
    bank: &PromptBank,
    featurizer: &dyn TextFeaturizer,
    model: &ModelState,
    categories: &[Category],
    mode: PromptMode,
) -> Result<Vec<ClassPrototype>> {
    match mode {
        PromptMode::Anomaly => ANOMALY_PROMPTS
            .iter()
            .enumerate()
            .map(|(id, p)| {
                Ok(ClassPrototype {
                    category: Category::new(id, *p, *p),
                    embedding: prompt_centroid(model, featurizer, &[p])?,
                    prompt_count: 1,
                })
            })
            .collect(),
        PromptMode::Naive => categories
            .iter()
            .map(|c| {
                Ok(ClassPrototype {
                    category: c.clone(),
                    embedding: prompt_centroid(model, featurizer, &[bank.naive_prompt(c)])?,
                    prompt_count: 1,
                })
            })
            .collect(),
        PromptMode::Ek => categories
            .iter()
            .map(|c| {
                let prompts = bank.ek_prompts(c)?;
                if prompts.is_empty() {
                    return Err(Error::Validation(format!(
                        "category `{}` has no expert-knowledge prompts",
                        c.name
                    )));
                }
                Ok(ClassPrototype {
                    category: c.clone(),
                    embedding: prompt_centroid(model, featurizer, prompts)
                        .map_err(|e| Error::numerical(format!("category `{}`: {e}", c.name)))?,
                    prompt_count: prompts.len(),
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotPrediction {
    /// Index into the prototype list.
    pub class: usize,
    pub probabilities: Array1<f64>,
    pub logits: Array1<f64>,
}

pub(crate) fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Prototype embeddings stacked as rows.
pub fn prototype_matrix(prototypes: &[ClassPrototype]) -> Array2<f64> {
    let dim = prototypes.first().map(|p| p.embedding.dim()).unwrap_or(0);
    let mut m = Array2::zeros((prototypes.len(), dim));
    for (mut row, p) in m.axis_iter_mut(Axis(0)).zip(prototypes) {
        row.assign(p.embedding.as_array());
    }
    m
}

/// `tau * u . v_c` for each prototype.
pub fn zero_shot_logits(tau: f64, image: &JointEmbedding, prototypes: &[ClassPrototype]) -> Result<Array1<f64>> {
    if prototypes.is_empty() {
        return Err(Error::Validation("no class prototypes".into()));
    }
    if let Some(p) = prototypes.iter().find(|p| p.embedding.dim() != image.dim()) {
        return Err(Error::shape(format!(
            "prototype `{}` has dimension {}, image embedding {}",
            p.category.name,
            p.embedding.dim(),
            image.dim()
        )));
    }
    Ok(prototypes
        .iter()
        .map(|p| tau * p.embedding.view().dot(&image.view()))
        .collect())
}

pub fn prediction_from_logits(logits: Array1<f64>) -> ZeroShotPrediction {
    ZeroShotPrediction {
        class: argmax(logits.view()),
        probabilities: softmax(logits.view()),
        logits,
    }
}

pub fn predict(model: &ModelState, image_feature: ArrayView1<f64>, prototypes: &[ClassPrototype]) -> Result<ZeroShotPrediction> {
    let u = model.embed_image(image_feature)?;
    Ok(prediction_from_logits(zero_shot_logits(model.tau(), &u, prototypes)?))
}

/// Predicts every row in parallel; output order follows the rows.
pub fn predict_batch(
    model: &ModelState,
    image_features: &Array2<f64>,
    prototypes: &[ClassPrototype],
) -> Result<Vec<ZeroShotPrediction>> {
    let rows: Vec<ArrayView1<f64>> = image_features.axis_iter(Axis(0)).collect();
    rows.into_par_iter()
        .enumerate()
        .map(|(i, r)| {
            predict(model, r, prototypes).map_err(|e| match e {
                Error::Numerical(m) => Error::numerical(format!("sample {i}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// A category counts as healthy if it is "normal" or a negated finding ("no ...").
pub fn is_normal_category(category: &Category) -> bool {
    category.name == "normal" || category.name.starts_with("no ")
}

/// Per-class and averaged accuracies for the two-prompt anomaly mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyAccuracy {
    /// Accuracy per original category (correct if its normal/disease group was predicted).
    pub per_class: Vec<(String, f64)>,
    /// Mean over the original categories.
    pub average_unmerged: f64,
    /// Mean over the two merged groups.
    pub average_merged: f64,
}

/// `truth[i]` indexes `categories`; `predicted[i]` is 0 for normal, 1 for disease.
pub fn anomaly_accuracy(categories: &[Category], truth: &[usize], predicted: &[usize]) -> Result<AnomalyAccuracy> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::shape("truth and predictions must be non-empty and of equal length"));
    }
    let mut hits = vec![0usize; categories.len()];
    let mut counts = vec![0usize; categories.len()];
    let mut group_hits = [0usize; 2];
    let mut group_counts = [0usize; 2];
    for (&t, &p) in truth.iter().zip(predicted) {
        let cat = categories
            .get(t)
            .ok_or_else(|| Error::Validation(format!("label index {t} outside class list")))?;
        let group = usize::from(!is_normal_category(cat));
        counts[t] += 1;
        group_counts[group] += 1;
        if p == group {
            hits[t] += 1;
            group_hits[group] += 1;
        }
    }
    let per_class: Vec<(String, f64)> = categories
        .iter()
        .enumerate()
        .filter(|(i, _)| counts[*i] > 0)
        .map(|(i, c)| (c.name.clone(), hits[i] as f64 / counts[i] as f64))
        .collect();
    let average_unmerged = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    let groups: Vec<f64> = (0..2)
        .filter(|&g| group_counts[g] > 0)
        .map(|g| group_hits[g] as f64 / group_counts[g] as f64)
        .collect();
    let average_merged = groups.iter().sum::<f64>() / groups.len() as f64;
    Ok(AnomalyAccuracy {
        per_class,
        average_unmerged,
        average_merged,
    })
}
