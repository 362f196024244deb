//! Projection heads, hypersphere normalization and temperature-scaled
//! cosine similarities.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the similarity scale.
pub const MAX_TAU: f64 = 1000.0;

/// Conventional contrastive logit-scale initialization, `ln(1/0.07)`.
pub fn default_log_tau() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(Array1<f64>);

impl JointEmbedding {
    /// Normalizes `v`; fails on a zero or non-finite norm.
    pub fn normalize(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::numerical(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(JointEmbedding(v / norm))
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Affine map `W x + b` from a modality's feature space into the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(format!(
                "head weights are {}x{} but bias has length {}",
                weights.nrows(),
                weights.ncols(),
                bias.len()
            )));
        }
        Ok(ProjectionHead { weights, bias })
    }

    /// Uniform weights in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, zero bias.
    pub fn init_uniform(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weights = Array2::from_shape_fn((d_out, d_in), |_| rng.random_range(-bound..=bound));
        ProjectionHead {
            weights,
            bias: Array1::zeros(d_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionHead {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn project(&self, feature: ArrayView1<f64>) -> Result<Array1<f64>> {
        if feature.len() != self.d_in() {
            return Err(Error::shape(format!(
                "feature has length {} but head expects {}",
                feature.len(),
                self.d_in()
            )));
        }
        Ok(self.weights.dot(&feature) + &self.bias)
    }

    pub fn project_normalize(&self, feature: ArrayView1<f64>) -> Result<JointEmbedding> {
        JointEmbedding::normalize(self.project(feature)?)
            .map_err(|_| Error::numerical("degenerate projection: zero-norm output"))
    }

    /// Projects every row of `features`; errors name the failing row.
    pub fn project_normalize_rows(&self, features: &Array2<f64>) -> Result<Vec<JointEmbedding>> {
        features
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, row)| {
                self.project_normalize(row).map_err(|e| match e {
                    Error::Numerical(m) => Error::numerical(format!("sample {i}: {m}")),
                    other => other,
                })
            })
            .collect()
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Trainable parameters: both projection heads and the log of the similarity scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub vision_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub log_tau: f64,
}

impl ModelState {
    pub fn new(vision_head: ProjectionHead, text_head: ProjectionHead, log_tau: f64) -> Result<Self> {
        if vision_head.d_out() != text_head.d_out() {
            return Err(Error::shape(format!(
                "joint dimension differs between heads: {} vs {}",
                vision_head.d_out(),
                text_head.d_out()
            )));
        }
        if !log_tau.is_finite() {
            return Err(Error::numerical("log_tau is not finite"));
        }
        let model = ModelState {
            vision_head,
            text_head,
            log_tau: log_tau.min(MAX_TAU.ln()),
        };
        if !(model.vision_head.is_finite() && model.text_head.is_finite()) {
            return Err(Error::numerical("model parameters are not finite"));
        }
        Ok(model)
    }

    /// Seeded random initialization with the default temperature.
    pub fn init(d_vision: usize, d_text: usize, d_joint: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision_head = ProjectionHead::init_uniform(d_joint, d_vision, &mut rng);
        let text_head = ProjectionHead::init_uniform(d_joint, d_text, &mut rng);
        ModelState {
            vision_head,
            text_head,
            log_tau: default_log_tau(),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn clamp_log_tau(&mut self) {
        self.log_tau = self.log_tau.min(MAX_TAU.ln());
    }

    pub fn d_joint(&self) -> usize {
        self.vision_head.d_out()
    }

    pub fn embed_image(&self, feature: ArrayView1<f64>) -> Result<JointEmbedding> {
        self.vision_head.project_normalize(feature)
    }

    pub fn embed_text(&self, feature: ArrayView1<f64>) -> Result<JointEmbedding> {
        self.text_head.project_normalize(feature)
    }
}

/// Matrix of dot products `u_i . v_j`.
pub fn similarity_matrix(u: &[JointEmbedding], v: &[JointEmbedding]) -> Result<Array2<f64>> {
    let dim = u.first().or(v.first()).map(JointEmbedding::dim).unwrap_or(0);
    if let Some(bad) = u.iter().chain(v).find(|e| e.dim() != dim) {
        return Err(Error::shape(format!(
            "embedding of dimension {} among embeddings of dimension {dim}",
            bad.dim()
        )));
    }
    Ok(stack(u, dim).dot(&stack(v, dim).t()))
}

pub(crate) fn stack(rows: &[JointEmbedding], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src.as_array());
    }
    out
}

/// `exp(log_tau) * sims`, the softmax logits.
pub fn scaled_logits(sims: &Array2<f64>, log_tau: f64) -> Array2<f64> {
    sims * log_tau.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_head(d_out: usize, d_in: usize, seed: u64) -> ProjectionHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = ProjectionHead::init_uniform(d_out, d_in, &mut rng);
        head.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        head
    }

    fn random_unit(dim: usize, rng: &mut impl Rng) -> JointEmbedding {
        JointEmbedding::normalize(Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn normalizes_three_four() {
        let head = ProjectionHead::identity(2);
        let u = head.project_normalize(array![3.0, 4.0].view()).unwrap();
        assert!((u.view()[0] - 0.6).abs() < 1e-15);
        assert!((u.view()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_head_is_numerical_error() {
        let head = ProjectionHead::new(Array2::zeros((3, 2)), Array1::zeros(3)).unwrap();
        let err = head.project_normalize(array![1.0, 2.0].view()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let head = ProjectionHead::identity(2);
        assert!(matches!(head.project(array![1.0].view()), Err(Error::Shape(_))));
    }

    #[test]
    fn project_normalize_matches_loop_oracle() {
        let head = random_head(4, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut y = vec![0.0; 4];
        for (r, out) in y.iter_mut().enumerate() {
            *out = head.bias[r];
            for (c, xv) in x.iter().enumerate() {
                *out += head.weights[[r, c]] * xv;
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = head.project_normalize(Array1::from(x).view()).unwrap();
        for (a, b) in u.view().iter().zip(&y) {
            assert!((a - b / norm).abs() < 1e-10);
        }
        assert!((u.view().dot(&u.view()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn similarity_basics() {
        let e1 = JointEmbedding::normalize(array![1.0, 0.0]).unwrap();
        let e2 = JointEmbedding::normalize(array![0.0, 1.0]).unwrap();
        assert_eq!(similarity_matrix(std::slice::from_ref(&e1), std::slice::from_ref(&e1)).unwrap(), array![[1.0]]);
        assert_eq!(similarity_matrix(std::slice::from_ref(&e1), &[e2]).unwrap(), array![[0.0]]);
        let e3 = JointEmbedding::normalize(array![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(similarity_matrix(&[e1], &[e3]), Err(Error::Shape(_))));
    }

    #[test]
    fn similarity_matches_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<_> = (0..4).map(|_| random_unit(7, &mut rng)).collect();
        let v: Vec<_> = (0..3).map(|_| random_unit(7, &mut rng)).collect();
        let s = similarity_matrix(&u, &v).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let dot: f64 = u[i].view().iter().zip(v[j].view().iter()).map(|(a, b)| a * b).sum();
                assert!((s[[i, j]] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_logits_examples() {
        assert_eq!(scaled_logits(&array![[0.5]], 0.0), array![[0.5]]);
        let l = scaled_logits(&array![[0.5, -0.5]], 2f64.ln());
        assert!((l[[0, 0]] - 1.0).abs() < 1e-15 && (l[[0, 1]] + 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sims = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let lt = 1.7;
        let l = scaled_logits(&sims, lt);
        for (a, b) in l.iter().zip(sims.iter()) {
            assert!((a - lt.exp() * b).abs() < 1e-15);
        }
    }

    #[test]
    fn log_tau_clamped_on_construction() {
        let m = ModelState::new(ProjectionHead::identity(2), ProjectionHead::identity(2), 20.0).unwrap();
        assert!(m.tau() <= MAX_TAU * (1.0 + 1e-12));
        assert!((default_log_tau() - 2.659).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn direction_is_scale_invariant(seed in 0u64..1000, alpha in 0.01f64..100.0) {
            let mut head = random_head(3, 5, seed);
            head.bias.fill(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let a = head.project_normalize(x.view()).unwrap();
            let b = head.project_normalize((&x * alpha).view()).unwrap();
            for (p, q) in a.view().iter().zip(b.view().iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn similarity_transpose_and_range(seed in 0u64..1000, n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<_> = (0..n).map(|_| random_unit(4, &mut rng)).collect();
            let v: Vec<_> = (0..m).map(|_| random_unit(4, &mut rng)).collect();
            let uv = similarity_matrix(&u, &v).unwrap();
            let vu = similarity_matrix(&v, &u).unwrap();
            for i in 0..n {
                for j in 0..m {
                    prop_assert!((uv[[i, j]] - vu[[j, i]]).abs() < 1e-12);
                    prop_assert!(uv[[i, j]].abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
