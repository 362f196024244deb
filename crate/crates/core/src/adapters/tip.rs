//! Tip-Adapter: a key/value cache of the support set blended with the
//! zero-shot logits, optionally with trainable keys (Tip-Adapter-F).
//!
//! ```text
//! logits = tau * u P^T + alpha * exp(-beta * (1 - u K^T)) V
//! ```
//!
//! `u` is the projected-normalized query, `P` the prototype matrix, `K` the
//! support keys and `V` their one-hot labels.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_rows, ensure_labels, FitConfig};
use crate::embedding::{JointEmbedding, ModelState};
use crate::error::{Error, Result};
use crate::trainer::{adamw_step, OptimizerState, ParamBlock};
use crate::zeroshot::{argmax, prototype_matrix, softmax, zero_shot_logits, ClassPrototype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipCache {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub keys_trainable: bool,
}

impl TipCache {
    /// Builds the cache from raw support features.
    pub fn build(
        model: &ModelState,
        support: &Array2<f64>,
        labels: &[usize],
        n_classes: usize,
        alpha: f64,
        beta: f64,
        keys_trainable: bool,
    ) -> Result<Self> {
        ensure_labels(support.nrows(), labels, n_classes)?;
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Config("alpha and beta must be finite and nonnegative".into()));
        }
        let keys = embed_rows(model, support)?;
        let mut values = Array2::zeros((labels.len(), n_classes));
        for (i, &y) in labels.iter().enumerate() {
            values[[i, y]] = 1.0;
        }
        Ok(TipCache {
            keys,
            values,
            alpha,
            beta,
            keys_trainable,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Cache term `alpha * exp(-beta (1 - u K^T)) V` for one query.
    pub fn cache_logits(&self, query: ArrayView1<f64>) -> Array1<f64> {
        let affinity = self.keys.dot(&query).mapv(|a| (-self.beta * (1.0 - a)).exp());
        affinity.dot(&self.values) * self.alpha
    }

    /// Full logits for an embedded query.
    pub fn logits(&self, tau: f64, query: &JointEmbedding, prototypes: &[ClassPrototype]) -> Result<Array1<f64>> {
        if self.keys.nrows() == 0 {
            return Err(Error::Validation("Tip-Adapter cache is empty".into()));
        }
        if self.keys.ncols() != query.dim() {
            return Err(Error::shape(format!(
                "cache keys have dimension {}, query {}",
                self.keys.ncols(),
                query.dim()
            )));
        }
        if prototypes.len() != self.n_classes() {
            return Err(Error::shape(format!(
                "{} prototypes for a cache over {} classes",
                prototypes.len(),
                self.n_classes()
            )));
        }
        Ok(zero_shot_logits(tau, query, prototypes)? + self.cache_logits(query.view()))
    }
}

pub fn tip_adapter_predict(
    cache: &TipCache,
    model: &ModelState,
    prototypes: &[ClassPrototype],
    image_feature: ArrayView1<f64>,
) -> Result<(usize, Array1<f64>)> {
    let u = model.embed_image(image_feature)?;
    let logits = cache.logits(model.tau(), &u, prototypes)?;
    Ok((argmax(logits.view()), logits))
}

/// Mean support cross-entropy and its gradient with respect to the keys.
pub(crate) fn support_loss_and_key_grad(
    cache: &TipCache,
    tau: f64,
    queries: &Array2<f64>,
    protos: &Array2<f64>,
    labels: &[usize],
) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let affinity = queries
        .dot(&cache.keys.t())
        .mapv(|a| (-cache.beta * (1.0 - a)).exp());
    let logits = queries.dot(&protos.t()) * tau + affinity.dot(&cache.values) * cache.alpha;
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(logits.dim());
    for ((mut d, row), &y) in d_logits.axis_iter_mut(Axis(0)).zip(logits.axis_iter(Axis(0))).zip(labels) {
        let p = softmax(row);
        loss -= p[y].ln();
        d.assign(&p);
        d[y] -= 1.0;
    }
    d_logits /= n;
    let d_affinity = d_logits.dot(&cache.values.t()) * cache.alpha;
    let d_sim = d_affinity * &affinity * cache.beta;
    (loss / n, d_sim.t().dot(queries))
}

/// Result of fitting trainable keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TipFit {
    pub cache: TipCache,
    /// Full-support loss before the first step and after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Optimizes the keys with AdamW on support cross-entropy; keys are
/// renormalized after every step. Values never change.
pub fn fit_tip_adapter_f(
    cache: &TipCache,
    model: &ModelState,
    prototypes: &[ClassPrototype],
    support: &Array2<f64>,
    labels: &[usize],
    config: &FitConfig,
) -> Result<TipFit> {
    if !cache.keys_trainable {
        return Err(Error::Config("cache keys are not trainable".into()));
    }
    ensure_labels(support.nrows(), labels, cache.n_classes())?;
    let queries = embed_rows(model, support)?;
    let protos = prototype_matrix(prototypes);
    if protos.nrows() != cache.n_classes() {
        return Err(Error::shape("prototype count does not match cache classes"));
    }
    let tau = model.tau();
    let mut out = cache.clone();
    let mut state = OptimizerState::default();
    let mut trace = vec![support_loss_and_key_grad(&out, tau, &queries, &protos, labels).0];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.unwrap_or(labels.len()).max(1);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..config.epochs {
        if batch < labels.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let q = queries.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, grad) = support_loss_and_key_grad(&out, tau, &q, &protos, &y);
            let mut blocks = [ParamBlock {
                name: "tip.keys",
                values: out.keys.as_slice_mut().expect("standard layout"),
                grads: grad.as_slice().expect("standard layout"),
                decay: true,
            }];
            adamw_step(&mut blocks, &mut state, config.lr, config.weight_decay, &config.adam)?;
            for mut row in out.keys.axis_iter_mut(Axis(0)) {
                let norm = row.dot(&row).sqrt();
                if norm > 0.0 {
                    row /= norm;
                }
            }
        }
        trace.push(support_loss_and_key_grad(&out, tau, &queries, &protos, labels).0);
    }
    Ok(TipFit {
        cache: out,
        loss_trace: trace,
    })
}
