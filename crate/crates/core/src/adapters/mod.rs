//! Few-shot transfer on top of a frozen model: linear probes over a chosen
//! feature stage, CLIP-Adapter, Tip-Adapter and Tip-Adapter-F.

pub mod clip_adapter;
pub mod linear_probe;
pub mod tip;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

pub use clip_adapter::{clip_adapter_predict, fit_clip_adapter, ClipAdapterFit, ClipAdapterHead};
pub use linear_probe::{default_l2_lambda, fit_linear_probe, predict_linear_probe, LinearProbe, ProbeConfig};
pub use tip::{fit_tip_adapter_f, tip_adapter_predict, TipCache, TipFit};

use crate::embedding::ModelState;
use crate::error::{Error, Result};
use crate::trainer::AdamWConfig;
use crate::zeroshot::{argmax, softmax, zero_shot_logits, ClassPrototype};

/// Which stage of the vision branch feeds a linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChoice {
    /// Raw encoder features, before the projection head.
    #[default]
    Vision,
    /// Projection head output, unnormalized.
    Projected,
    /// Projection head output on the unit sphere.
    ProjectedNormalized,
}

impl FeatureChoice {
    pub const ALL: [FeatureChoice; 3] = [
        FeatureChoice::Vision,
        FeatureChoice::Projected,
        FeatureChoice::ProjectedNormalized,
    ];
}

impl std::str::FromStr for FeatureChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(FeatureChoice::Vision),
            "proj" | "projected" => Ok(FeatureChoice::Projected),
            "proj-norm" | "projected_normalized" => Ok(FeatureChoice::ProjectedNormalized),
            other => Err(Error::Config(format!("unknown feature choice `{other}`"))),
        }
    }
}

pub fn extract_features(model: &ModelState, raw: ArrayView1<f64>, choice: FeatureChoice) -> Result<Array1<f64>> {
    match choice {
        FeatureChoice::Vision => {
            if raw.len() != model.vision_head.d_in() {
                return Err(Error::shape(format!(
                    "feature has length {} but model expects {}",
                    raw.len(),
                    model.vision_head.d_in()
                )));
            }
            Ok(raw.to_owned())
        }
        FeatureChoice::Projected => model.vision_head.project(raw),
        FeatureChoice::ProjectedNormalized => Ok(model.embed_image(raw)?.into_inner()),
    }
}

pub fn extract_feature_rows(model: &ModelState, raw: &Array2<f64>, choice: FeatureChoice) -> Result<Array2<f64>> {
    let dim = match choice {
        FeatureChoice::Vision => raw.ncols(),
        _ => model.d_joint(),
    };
    let mut out = Array2::zeros((raw.nrows(), dim));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(raw.axis_iter(Axis(0))) {
        dst.assign(&extract_features(model, src, choice)?);
    }
    Ok(out)
}

/// Projected-normalized rows.
pub(crate) fn embed_rows(model: &ModelState, raw: &Array2<f64>) -> Result<Array2<f64>> {
    extract_feature_rows(model, raw, FeatureChoice::ProjectedNormalized)
}

pub(crate) fn ensure_labels(rows: usize, labels: &[usize], n_classes: usize) -> Result<()> {
    if rows != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{rows} support rows for {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Validation(format!("label {bad} outside {n_classes} classes")));
    }
    Ok(())
}

/// Optimizer settings for the trainable adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` means full-batch steps.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: None,
            seed: 0,
            adam: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMethod {
    ZeroShot,
    Lp,
    ClipAdapter,
    TipAdapter,
    TipAdapterF,
}

impl std::str::FromStr for AdapterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" | "zeroshot" => Ok(AdapterMethod::ZeroShot),
            "lp" => Ok(AdapterMethod::Lp),
            "clip-adapter" => Ok(AdapterMethod::ClipAdapter),
            "tip-adapter" => Ok(AdapterMethod::TipAdapter),
            "tip-adapter-f" => Ok(AdapterMethod::TipAdapterF),
            other => Err(Error::Config(format!("unknown adapter method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub features: FeatureChoice,
    /// Defaults to `1 / (k * n_classes)` with `k` the mean shots per class.
    pub l2_lambda: Option<f64>,
    pub probe: ProbeConfig,
    pub alpha: f64,
    pub beta: f64,
    pub residual_ratio: f64,
    /// Defaults to a quarter of the joint dimension.
    pub bottleneck: Option<usize>,
    pub fit: FitConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            features: FeatureChoice::Vision,
            l2_lambda: None,
            probe: ProbeConfig::default(),
            alpha: 1.0,
            beta: 5.5,
            residual_ratio: 0.2,
            bottleneck: None,
            fit: FitConfig::default(),
        }
    }
}

/// Frozen model and class prototypes shared by every adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterContext<'a> {
    pub model: &'a ModelState,
    pub prototypes: &'a [ClassPrototype],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FittedAdapter {
    ZeroShot,
    Lp(LinearProbe),
    ClipAdapter(ClipAdapterHead),
    TipAdapter(TipCache),
}

pub fn fit_adapter(
    method: AdapterMethod,
    ctx: AdapterContext<'_>,
    support: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    config: &AdapterConfig,
) -> Result<FittedAdapter> {
    let needs_prototypes = method != AdapterMethod::Lp;
    if needs_prototypes && ctx.prototypes.len() != n_classes {
        return Err(Error::shape(format!(
            "{} prototypes for {n_classes} classes",
            ctx.prototypes.len()
        )));
    }
    Ok(match method {
        AdapterMethod::ZeroShot => FittedAdapter::ZeroShot,
        AdapterMethod::Lp => {
            let x = extract_feature_rows(ctx.model, support, config.features)?;
            let shots = (labels.len() as f64 / n_classes.max(1) as f64).round() as usize;
            let lambda = config.l2_lambda.unwrap_or_else(|| default_l2_lambda(shots, n_classes));
            FittedAdapter::Lp(fit_linear_probe(&x, labels, n_classes, lambda, config.features, &config.probe)?)
        }
        AdapterMethod::ClipAdapter => {
            let dim = ctx.model.d_joint();
            let r = config.bottleneck.unwrap_or((dim / 4).max(1));
            let head = ClipAdapterHead::init(dim, r, config.residual_ratio, config.fit.seed)?;
            FittedAdapter::ClipAdapter(
                fit_clip_adapter(&head, ctx.model, ctx.prototypes, support, labels, &config.fit)?.head,
            )
        }
        AdapterMethod::TipAdapter => FittedAdapter::TipAdapter(TipCache::build(
            ctx.model, support, labels, n_classes, config.alpha, config.beta, false,
        )?),
        AdapterMethod::TipAdapterF => {
            let cache = TipCache::build(ctx.model, support, labels, n_classes, config.alpha, config.beta, true)?;
            FittedAdapter::TipAdapter(
                fit_tip_adapter_f(&cache, ctx.model, ctx.prototypes, support, labels, &config.fit)?.cache,
            )
        }
    })
}

impl FittedAdapter {
    /// Class scores for one raw image feature.
    pub fn logits(&self, ctx: AdapterContext<'_>, raw: ArrayView1<f64>) -> Result<Array1<f64>> {
        match self {
            FittedAdapter::ZeroShot => {
                let u = ctx.model.embed_image(raw)?;
                zero_shot_logits(ctx.model.tau(), &u, ctx.prototypes)
            }
            FittedAdapter::Lp(probe) => probe.scores(extract_features(ctx.model, raw, probe.feature_choice)?.view()),
            FittedAdapter::ClipAdapter(head) => Ok(clip_adapter_predict(head, ctx.model, ctx.prototypes, raw)?.1),
            FittedAdapter::TipAdapter(cache) => Ok(tip_adapter_predict(cache, ctx.model, ctx.prototypes, raw)?.1),
        }
    }

    /// `(class, probabilities)` with lowest-index tie-break.
    pub fn predict(&self, ctx: AdapterContext<'_>, raw: ArrayView1<f64>) -> Result<(usize, Array1<f64>)> {
        let l = self.logits(ctx, raw)?;
        Ok((argmax(l.view()), softmax(l.view())))
    }

    pub fn predict_rows(&self, ctx: AdapterContext<'_>, raw: &Array2<f64>) -> Result<Vec<(usize, Array1<f64>)>> {
        raw.axis_iter(Axis(0)).map(|r| self.predict(ctx, r)).collect()
    }
}

/// Linear probes on all three feature stages from one frozen model.
pub fn feature_ablation(
    model: &ModelState,
    support: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    l2_lambda: f64,
    probe: &ProbeConfig,
) -> Result<Vec<LinearProbe>> {
    FeatureChoice::ALL
        .iter()
        .map(|&choice| {
            let x = extract_feature_rows(model, support, choice)?;
            fit_linear_probe(&x, labels, n_classes, l2_lambda, choice, probe)
        })
        .collect()
}
