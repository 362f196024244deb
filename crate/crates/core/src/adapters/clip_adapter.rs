//! CLIP-Adapter: a residual bottleneck MLP on the image embedding.
//!
//! `a = ratio * relu(up * relu(down * u)) + (1 - ratio) * u`, renormalized,
//! then classified against the zero-shot prototypes.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_rows, ensure_labels, FitConfig};
use crate::embedding::{JointEmbedding, ModelState};
use crate::error::{Error, Result};
use crate::trainer::{adamw_step, OptimizerState, ParamBlock};
use crate::zeroshot::{argmax, prototype_matrix, softmax, zero_shot_logits, ClassPrototype};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAdapterHead {
    /// `r x D`
    pub down: Array2<f64>,
    /// `D x r`
    pub up: Array2<f64>,
    pub residual_ratio: f64,
}

impl ClipAdapterHead {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(dim: usize, bottleneck: usize, residual_ratio: f64, seed: u64) -> Result<Self> {
        if bottleneck == 0 || dim == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&residual_ratio) {
            return Err(Error::Config(format!("residual ratio {residual_ratio} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bd = 1.0 / (dim as f64).sqrt();
        let bu = 1.0 / (bottleneck as f64).sqrt();
        let down = Array2::from_shape_fn((bottleneck, dim), |_| rng.random_range(-bd..=bd));
        let up = Array2::from_shape_fn((dim, bottleneck), |_| rng.random_range(-bu..=bu));
        Ok(ClipAdapterHead { down, up, residual_ratio })
    }

    pub fn bottleneck(&self) -> usize {
        self.down.nrows()
    }

    fn forward(&self, u: ArrayView1<f64>) -> Forward {
        let hidden_pre = self.down.dot(&u);
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let out_pre = self.up.dot(&hidden);
        let mlp = out_pre.mapv(|v| v.max(0.0));
        let mixed = &mlp * self.residual_ratio + &(&u * (1.0 - self.residual_ratio));
        let norm = mixed.dot(&mixed).sqrt();
        Forward {
            hidden_pre,
            hidden,
            out_pre,
            mixed,
            norm,
        }
    }

    /// Adapted, renormalized embedding.
    pub fn adapt(&self, u: &JointEmbedding) -> Result<JointEmbedding> {
        if u.dim() != self.down.ncols() {
            return Err(Error::shape(format!(
                "adapter expects dimension {}, got {}",
                self.down.ncols(),
                u.dim()
            )));
        }
        JointEmbedding::normalize(self.forward(u.view()).mixed)
            .map_err(|_| Error::numerical("adapted embedding has zero norm"))
    }

    pub fn logits(&self, tau: f64, u: &JointEmbedding, prototypes: &[ClassPrototype]) -> Result<Array1<f64>> {
        zero_shot_logits(tau, &self.adapt(u)?, prototypes)
    }
}

struct Forward {
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
    out_pre: Array1<f64>,
    mixed: Array1<f64>,
    norm: f64,
}

pub fn clip_adapter_predict(
    head: &ClipAdapterHead,
    model: &ModelState,
    prototypes: &[ClassPrototype],
    image_feature: ArrayView1<f64>,
) -> Result<(usize, Array1<f64>)> {
    let u = model.embed_image(image_feature)?;
    let logits = head.logits(model.tau(), &u, prototypes)?;
    Ok((argmax(logits.view()), logits))
}

/// Mean cross-entropy over embedded queries and gradients for `(down, up)`.
pub(crate) fn loss_and_grads(
    head: &ClipAdapterHead,
    tau: f64,
    queries: &Array2<f64>,
    protos: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut d_down = Array2::zeros(head.down.dim());
    let mut d_up = Array2::zeros(head.up.dim());
    for (u, &y) in queries.axis_iter(Axis(0)).zip(labels) {
        let f = head.forward(u);
        if !(f.norm > 0.0 && f.norm.is_finite()) {
            return Err(Error::numerical("adapted embedding has zero norm"));
        }
        let a = &f.mixed / f.norm;
        let logits = protos.dot(&a) * tau;
        let p = softmax(logits.view());
        loss -= p[y].ln();
        let mut d_logits = p;
        d_logits[y] -= 1.0;
        d_logits /= n;
        let d_a = protos.t().dot(&d_logits) * tau;
        let d_mixed = (&d_a - &(&a * a.dot(&d_a))) / f.norm;
        let d_out_pre = Array1::from_shape_fn(f.out_pre.len(), |k| {
            if f.out_pre[k] > 0.0 {
                head.residual_ratio * d_mixed[k]
            } else {
                0.0
            }
        });
        d_up += &outer(&d_out_pre, &f.hidden);
        let d_hidden = head.up.t().dot(&d_out_pre);
        let d_hidden_pre = Array1::from_shape_fn(d_hidden.len(), |k| {
            if f.hidden_pre[k] > 0.0 {
                d_hidden[k]
            } else {
                0.0
            }
        });
        d_down += &outer(&d_hidden_pre, &u.to_owned());
    }
    Ok((loss / n, d_down, d_up))
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipAdapterFit {
    pub head: ClipAdapterHead,
    pub loss_trace: Vec<f64>,
}

/// Trains the bottleneck MLP with AdamW on support cross-entropy.
pub fn fit_clip_adapter(
    head: &ClipAdapterHead,
    model: &ModelState,
    prototypes: &[ClassPrototype],
    support: &Array2<f64>,
    labels: &[usize],
    config: &FitConfig,
) -> Result<ClipAdapterFit> {
    ensure_labels(support.nrows(), labels, prototypes.len())?;
    let queries = embed_rows(model, support)?;
    let protos = prototype_matrix(prototypes);
    let tau = model.tau();
    let mut out = head.clone();
    let mut state = OptimizerState::default();
    let mut trace = vec![loss_and_grads(&out, tau, &queries, &protos, labels)?.0];
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
            let (_, d_down, d_up) = loss_and_grads(&out, tau, &q, &protos, &y)?;
            let mut blocks = [
                ParamBlock {
                    name: "clip_adapter.down",
                    values: out.down.as_slice_mut().expect("standard layout"),
                    grads: d_down.as_slice().expect("standard layout"),
                    decay: true,
                },
                ParamBlock {
                    name: "clip_adapter.up",
                    values: out.up.as_slice_mut().expect("standard layout"),
                    grads: d_up.as_slice().expect("standard layout"),
                    decay: true,
                },
            ];
            adamw_step(&mut blocks, &mut state, config.lr, config.weight_decay, &config.adam)?;
        }
        trace.push(loss_and_grads(&out, tau, &queries, &protos, labels)?.0);
    }
    Ok(ClipAdapterFit {
        head: out,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ProjectionHead;
    use crate::prompt_bank::Category;

    fn setup(seed: u64) -> (ModelState, Vec<ClassPrototype>, Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ModelState::new(ProjectionHead::identity(8), ProjectionHead::identity(8), 2.0).unwrap();
        let protos = (0..3)
            .map(|c| ClassPrototype {
                category: Category::new(c, format!("c{c}"), format!("c{c}")),
                embedding: JointEmbedding::normalize(Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0))).unwrap(),
                prompt_count: 1,
            })
            .collect();
        let support = Array2::from_shape_fn((12, 8), |_| rng.random_range(-1.0..1.0));
        let labels = (0..12).map(|i| i % 3).collect();
        (model, protos, support, labels)
    }

    #[test]
    fn zero_ratio_equals_zero_shot() {
        let (model, protos, _, _) = setup(1);
        let head = ClipAdapterHead::init(8, 2, 0.0, 3).unwrap();
        let x = Array1::from_shape_fn(8, |k| (k as f64 * 0.7).sin());
        let (c, logits) = clip_adapter_predict(&head, &model, &protos, x.view()).unwrap();
        let zs = crate::zeroshot::predict(&model, x.view(), &protos).unwrap();
        assert_eq!(c, zs.class);
        for (a, b) in logits.iter().zip(zs.logits.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mlp_keeps_direction() {
        let (model, protos, _, _) = setup(2);
        let mut head = ClipAdapterHead::init(8, 2, 0.6, 3).unwrap();
        head.up.fill(0.0);
        let x = Array1::from_shape_fn(8, |k| (k as f64).cos());
        let u = model.embed_image(x.view()).unwrap();
        let a = head.adapt(&u).unwrap();
        for (p, q) in a.view().iter().zip(u.view().iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        let (c, _) = clip_adapter_predict(&head, &model, &protos, x.view()).unwrap();
        assert_eq!(c, crate::zeroshot::predict(&model, x.view(), &protos).unwrap().class);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, protos, support, labels) = setup(3);
        let head = ClipAdapterHead::init(8, 3, 0.4, 5).unwrap();
        let q = embed_rows(&model, &support).unwrap();
        let p = prototype_matrix(&protos);
        let tau = model.tau();
        let (_, d_down, d_up) = loss_and_grads(&head, tau, &q, &p, &labels).unwrap();
        let h = 1e-6;
        let loss = |hd: &ClipAdapterHead| loss_and_grads(hd, tau, &q, &p, &labels).unwrap().0;
        for ((r, c), g) in d_down.indexed_iter() {
            let mut a = head.clone();
            a.down[[r, c]] += h;
            let mut b = head.clone();
            b.down[[r, c]] -= h;
            let n = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((g - n).abs() < 1e-6, "down[{r},{c}] {g} vs {n}");
        }
        for ((r, c), g) in d_up.indexed_iter() {
            let mut a = head.clone();
            a.up[[r, c]] += h;
            let mut b = head.clone();
            b.up[[r, c]] -= h;
            let n = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((g - n).abs() < 1e-6, "up[{r},{c}] {g} vs {n}");
        }
    }

    #[test]
    fn fitting_lowers_loss() {
        let (model, protos, support, labels) = setup(4);
        let head = ClipAdapterHead::init(8, 2, 0.2, 1).unwrap();
        let fit = fit_clip_adapter(&head, &model, &protos, &support, &labels, &FitConfig::default()).unwrap();
        assert!(fit.loss_trace.last().unwrap() < &fit.loss_trace[0]);
        let again = fit_clip_adapter(&head, &model, &protos, &support, &labels, &FitConfig::default()).unwrap();
        assert_eq!(fit.head, again.head);
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(ClipAdapterHead::init(4, 1, 1.5, 0).is_err());
        assert!(ClipAdapterHead::init(4, 0, 0.5, 0).is_err());
    }
}
