//! Mini-batch optimization of the contrastive objective: warm-up cosine
//! schedule, AdamW with decoupled weight decay, per-sample prompt sampling.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{total_loss_and_grads, LossGradients, RawBatch};
use crate::embedding::ModelState;
use crate::error::{Error, Result};
use crate::io::{Precision, TextFeaturizer, TripletRecord};
use crate::prompt_bank::{Category, PromptBank};

/// Linear warm-up to `base_lr` then cosine decay to zero.
///
/// The ramp is `base_lr * (step + 1) / warmup_steps`, so the first step
/// already moves the parameters.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / decay_steps as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

/// A parameter slice, its gradient, and whether weight decay applies.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    pub decay: bool,
}

/// One AdamW update over all blocks. Nothing is modified if any gradient
/// is non-finite.
pub fn adamw_step(
    blocks: &mut [ParamBlock<'_>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for b in blocks.iter() {
        if b.values.len() != b.grads.len() {
            return Err(Error::shape(format!("block `{}`: gradient length mismatch", b.name)));
        }
        if b.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!("non-finite gradient in `{}`", b.name)));
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = blocks.iter().map(|b| vec![0.0; b.values.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != blocks.len()
        || state.first_moment.iter().zip(blocks.iter()).any(|(m, b)| m.len() != b.values.len())
    {
        return Err(Error::shape("optimizer state does not match parameter blocks"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, b) in blocks.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        let decay = if b.decay { 1.0 - lr * weight_decay } else { 1.0 };
        for i in 0..b.values.len() {
            let g = b.grads[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            b.values[i] = b.values[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn model_blocks<'a>(model: &'a mut ModelState, grads: &'a LossGradients) -> [ParamBlock<'a>; 5] {
    let slice = |a: &'a mut Array2<f64>| a.as_slice_mut().expect("standard layout");
    let vslice = |a: &'a mut Array1<f64>| a.as_slice_mut().expect("standard layout");
    [
        ParamBlock {
            name: "vision_head.weights",
            values: slice(&mut model.vision_head.weights),
            grads: grads.vision_head.weights.as_slice().expect("standard layout"),
            decay: true,
        },
        ParamBlock {
            name: "vision_head.bias",
            values: vslice(&mut model.vision_head.bias),
            grads: grads.vision_head.bias.as_slice().expect("standard layout"),
            decay: true,
        },
        ParamBlock {
            name: "text_head.weights",
            values: slice(&mut model.text_head.weights),
            grads: grads.text_head.weights.as_slice().expect("standard layout"),
            decay: true,
        },
        ParamBlock {
            name: "text_head.bias",
            values: vslice(&mut model.text_head.bias),
            grads: grads.text_head.bias.as_slice().expect("standard layout"),
            decay: true,
        },
        ParamBlock {
            name: "log_tau",
            values: std::slice::from_mut(&mut model.log_tau),
            grads: std::slice::from_ref(&grads.log_tau),
            decay: false,
        },
    ]
}

/// Applies one optimizer step to a model from its loss gradients.
pub fn step_model(
    model: &mut ModelState,
    grads: &LossGradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let mut blocks = model_blocks(model, grads);
    adamw_step(&mut blocks, state, lr, weight_decay, cfg)?;
    model.clamp_log_tau();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 15,
            base_lr: 1e-4,
            weight_decay: 1e-2,
            warmup_epochs: 1.0,
            seed: 0,
            precision: Precision::F64,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        let finite = [self.base_lr, self.weight_decay, self.warmup_epochs]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.base_lr == 0.0 {
            return Err(Error::Config("rates must be finite, base_lr positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub trace: Vec<EpochLog>,
}

/// Everything the training loop reads besides the configuration.
pub struct TrainData<'a> {
    pub records: &'a [TripletRecord],
    /// Rows indexed by `TripletRecord::image_feature_index`.
    pub image_features: &'a Array2<f64>,
    /// Indexed by `TripletRecord::label`.
    pub categories: &'a [Category],
    pub bank: &'a PromptBank,
    pub featurizer: &'a dyn TextFeaturizer,
}

const PROMPT_STREAM_OFFSET: u64 = 1 << 32;

/// Runs the full training schedule.
pub fn train(data: &TrainData<'_>, config: &TrainConfig, init: ModelState) -> Result<TrainOutcome> {
    config.validate()?;
    if data.records.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (i, r) in data.records.iter().enumerate() {
        if r.image_feature_index >= data.image_features.nrows() {
            return Err(Error::Validation(format!(
                "record {i}: image index {} beyond {} rows",
                r.image_feature_index,
                data.image_features.nrows()
            )));
        }
        match data.categories.get(r.label) {
            Some(c) if c.id == r.label => {}
            _ => return Err(Error::Validation(format!("record {i}: unknown label id {}", r.label))),
        }
    }
    if data.image_features.ncols() != init.vision_head.d_in() {
        return Err(Error::shape(format!(
            "image features have dimension {}, vision head expects {}",
            data.image_features.ncols(),
            init.vision_head.d_in()
        )));
    }
    if data.featurizer.dim() != init.text_head.d_in() {
        return Err(Error::shape(format!(
            "text featurizer has dimension {}, text head expects {}",
            data.featurizer.dim(),
            init.text_head.d_in()
        )));
    }

    let n = data.records.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let warmup_steps = ((config.warmup_epochs * batches_per_epoch as f64).round() as usize).min(total_steps - 1);

    let mut model = init;
    let mut opt = OptimizerState::default();
    let mut text_cache: HashMap<String, Array1<f64>> = HashMap::new();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut lr = 0.0;
    let image_dim = data.image_features.ncols();
    let text_dim = data.featurizer.dim();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut prompt_rng = ChaCha8Rng::seed_from_u64(config.seed);
        prompt_rng.set_stream(PROMPT_STREAM_OFFSET + epoch as u64);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut images = Array2::zeros((chunk.len(), image_dim));
            let mut texts = Array2::zeros((chunk.len(), text_dim));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &k) in chunk.iter().enumerate() {
                let rec = &data.records[k];
                images.row_mut(row).assign(&data.image_features.row(rec.image_feature_index));
                let prompt = match &rec.raw_text {
                    Some(t) => t.clone(),
                    None => data
                        .bank
                        .sample_training_prompt(&data.categories[rec.label], &mut prompt_rng),
                };
                let feature: ArrayView1<f64> = match text_cache.get(&prompt) {
                    Some(f) => f.view(),
                    None => {
                        let f = data.featurizer.featurize(&prompt)?;
                        text_cache.entry(prompt).or_insert(f).view()
                    }
                };
                texts.row_mut(row).assign(&feature);
                labels.push(rec.label);
            }
            let grads = total_loss_and_grads(
                &model,
                RawBatch {
                    images: &images,
                    texts: &texts,
                    labels: &labels,
                },
            )?;
            loss_sum += grads.loss;
            lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr);
            step_model(&mut model, &grads, &mut opt, lr, config.weight_decay, &config.adam)?;
            if config.precision == Precision::F32 {
                round_model(&mut model, Precision::F32);
            }
            step += 1;
        }
        trace.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches_per_epoch as f64,
            lr,
            tau: model.tau(),
        });
    }
    Ok(TrainOutcome { model, trace })
}

fn round_model(model: &mut ModelState, precision: Precision) {
    for head in [&mut model.vision_head, &mut model.text_head] {
        head.weights.mapv_inplace(|v| precision.round(v));
        head.bias.mapv_inplace(|v| precision.round(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::SurrogateFeaturizer;

    #[test]
    fn schedule_examples() {
        let base = 1e-3;
        assert_eq!(lr_schedule(0, 100, 10, base), base / 10.0);
        assert_eq!(lr_schedule(9, 100, 10, base), base);
        assert_eq!(lr_schedule(10, 100, 10, base), base);
        assert!((lr_schedule(55, 100, 10, base) - base / 2.0).abs() < 1e-15);
        assert_eq!(lr_schedule(0, 10, 0, base), base);
    }

    #[test]
    fn schedule_continuous_and_nonnegative() {
        let (total, warm, base) = (200, 20, 0.5);
        let mut prev = 0.0;
        for s in 0..total {
            let lr = lr_schedule(s, total, warm, base);
            assert!(lr >= 0.0 && lr <= base);
            // per-step change bounded by the steeper of ramp and cosine slopes
            assert!((lr - prev).abs() <= base / warm as f64 + 1e-12, "jump at {s}");
            prev = lr;
        }
    }

    fn one_block(values: &mut [f64], grads: &[f64], lr: f64, wd: f64) -> OptimizerState {
        let mut state = OptimizerState::default();
        let mut blocks = [ParamBlock {
            name: "w",
            values,
            grads,
            decay: true,
        }];
        adamw_step(&mut blocks, &mut state, lr, wd, &AdamWConfig::default()).unwrap();
        state
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut w = vec![0.3, -1.2, 5.0];
        one_block(&mut w, &[0.0; 3], 0.1, 0.0);
        assert_eq!(w, vec![0.3, -1.2, 5.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut w = vec![1.0, 1.0, 1.0];
        let g = [0.5, -2.0, 1e-3];
        let lr = 0.01;
        one_block(&mut w, &g, lr, 0.0);
        for (wi, gi) in w.iter().zip(g) {
            // m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps)
            let expect = 1.0 - lr * gi / (gi.abs() + 1e-8);
            assert!((wi - expect).abs() < 1e-15);
            assert!((wi - (1.0 - lr * gi.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let mut w = vec![2.0, -4.0];
        one_block(&mut w, &[0.0, 0.0], 0.1, 0.5);
        assert_eq!(w, vec![2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn non_finite_gradient_named_and_untouched() {
        let mut w = vec![1.0];
        let mut state = OptimizerState::default();
        let mut blocks = [ParamBlock {
            name: "text_head.bias",
            values: &mut w,
            grads: &[f64::NAN],
            decay: true,
        }];
        let e = adamw_step(&mut blocks, &mut state, 0.1, 0.0, &AdamWConfig::default()).unwrap_err();
        assert!(e.to_string().contains("text_head.bias"));
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn log_tau_not_decayed() {
        let mut model = ModelState::init(2, 2, 2, 0);
        let before = model.log_tau;
        let zero = LossGradients {
            vision_head: crate::embedding::ProjectionHead::new(Array2::zeros((2, 2)), Array1::zeros(2)).unwrap(),
            text_head: crate::embedding::ProjectionHead::new(Array2::zeros((2, 2)), Array1::zeros(2)).unwrap(),
            log_tau: 0.0,
            loss: 0.0,
        };
        let w_before = model.vision_head.weights.clone();
        step_model(&mut model, &zero, &mut OptimizerState::default(), 0.1, 0.5, &AdamWConfig::default()).unwrap();
        assert_eq!(model.log_tau, before);
        assert_eq!(model.vision_head.weights, w_before * 0.95);
    }

    fn tiny_data() -> (Vec<TripletRecord>, Array2<f64>, Vec<Category>) {
        let cats = Category::vocabulary(&["glaucoma", "normal"]);
        let feats = ndarray::array![[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.9, 0.0, 0.1], [0.0, 0.8, 0.5]];
        let recs = (0..4)
            .map(|i| TripletRecord {
                sample_id: format!("s{i}"),
                image_feature_index: i,
                label: i % 2,
                raw_text: None,
            })
            .collect();
        (recs, feats, cats)
    }

    #[test]
    fn singleton_dataset_only_decays() {
        let (recs, feats, cats) = tiny_data();
        let bank = PromptBank::builtin();
        let f = SurrogateFeaturizer::new(6, 1).unwrap();
        let data = TrainData {
            records: &recs[..1],
            image_features: &feats,
            categories: &cats,
            bank: &bank,
            featurizer: &f,
        };
        let init = ModelState::init(3, 6, 4, 5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, init.clone()).unwrap();
        assert!(out.trace.iter().all(|e| e.mean_loss == 0.0));
        assert_eq!(out.model.log_tau, init.log_tau);
        let ratio = out.model.vision_head.weights[[0, 0]] / init.vision_head.weights[[0, 0]];
        assert!(ratio < 1.0 && ratio > 0.99);
    }

    #[test]
    fn deterministic_and_errors() {
        let (recs, feats, cats) = tiny_data();
        let bank = PromptBank::builtin();
        let f = SurrogateFeaturizer::new(6, 1).unwrap();
        let data = TrainData {
            records: &recs,
            image_features: &feats,
            categories: &cats,
            bank: &bank,
            featurizer: &f,
        };
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 3,
            base_lr: 1e-2,
            ..TrainConfig::default()
        };
        let init = ModelState::init(3, 6, 4, 5);
        let a = train(&data, &cfg, init.clone()).unwrap();
        let b = train(&data, &cfg, init.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 4);

        let empty = TrainData { records: &[], ..data };
        assert!(matches!(train(&empty, &cfg, init.clone()), Err(Error::Config(_))));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(train(&data, &bad, init).is_err());
    }
}
