//! Category-aware bidirectional contrastive objective with analytic gradients.
//!
//! For a paired batch with labels `y`, image embeddings `u_i`, text embeddings
//! `v_j` and logits `z_ij = tau * u_i . v_j`, the image-to-text term is
//!
//! ```text
//! L_i2t = - sum_i 1/|P(i)| sum_{i' in P(i)} log softmax_j(z_i.)[i']
//! ```
//!
//! with `P(i) = { i' : y_i' = y_i }`; the text-to-image term is the same
//! over columns. The objective is `L_i2t + L_t2i`.
//!
//! Gradient with respect to the logits, per direction, is
//! `softmax - 1[positive] / |P|`; it is then pushed through the temperature,
//! the cosine similarities, the hypersphere normalization and the affine
//! heads.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{JointEmbedding, ModelState, ProjectionHead};
use crate::error::{Error, Result};

/// Same-label index sets for each image (over texts) and each text (over images).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub i2t: Vec<Vec<usize>>,
    pub t2i: Vec<Vec<usize>>,
}

pub fn positive_sets(labels: &[usize]) -> PositiveSets {
    let i2t: Vec<Vec<usize>> = labels
        .iter()
        .map(|y| (0..labels.len()).filter(|&k| labels[k] == *y).collect())
        .collect();
    // paired batch: texts carry the same labels as images
    PositiveSets { t2i: i2t.clone(), i2t }
}

/// Raw features and labels for one paired batch.
#[derive(Debug, Clone, Copy)]
pub struct RawBatch<'a> {
    pub images: &'a Array2<f64>,
    pub texts: &'a Array2<f64>,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub vision_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub log_tau: f64,
    pub loss: f64,
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_sets(sets: &[Vec<usize>], n: usize, what: &str) -> Result<()> {
    if sets.len() != n {
        return Err(Error::shape(format!("{what}: {} positive sets for {n} rows", sets.len())));
    }
    if let Some(i) = sets.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("{what}: empty positive set for index {i}")));
    }
    Ok(())
}

fn directional_loss(log_probs: &Array2<f64>, sets: &[Vec<usize>]) -> f64 {
    let mut loss = 0.0;
    for (i, set) in sets.iter().enumerate() {
        let mean: f64 = set.iter().map(|&k| log_probs[[i, k]]).sum::<f64>() / set.len() as f64;
        loss -= mean;
    }
    loss
}

/// Image-to-text term; rows of `sims` are images.
pub fn loss_i2t(sims: &Array2<f64>, log_tau: f64, pos: &PositiveSets) -> Result<f64> {
    check_sets(&pos.i2t, sims.nrows(), "image-to-text")?;
    let lp = log_softmax_rows(&(sims * log_tau.exp()));
    Ok(directional_loss(&lp, &pos.i2t))
}

/// Text-to-image term; softmax runs over images (columns of `sims`).
pub fn loss_t2i(sims: &Array2<f64>, log_tau: f64, pos: &PositiveSets) -> Result<f64> {
    check_sets(&pos.t2i, sims.ncols(), "text-to-image")?;
    let lp = log_softmax_rows(&(sims.t().to_owned() * log_tau.exp()));
    Ok(directional_loss(&lp, &pos.t2i))
}

/// `d loss / d logits` for one direction, rows are the softmax axis.
fn logit_grad(log_probs: &Array2<f64>, sets: &[Vec<usize>]) -> Array2<f64> {
    let mut g = log_probs.mapv(f64::exp);
    for (i, set) in sets.iter().enumerate() {
        let w = 1.0 / set.len() as f64;
        for &k in set {
            g[[i, k]] -= w;
        }
    }
    g
}

struct Projected {
    raw_norms: Array1<f64>,
    unit: Array2<f64>,
}

fn project_batch(head: &ProjectionHead, features: &Array2<f64>, modality: &str) -> Result<Projected> {
    if features.ncols() != head.d_in() {
        return Err(Error::shape(format!(
            "{modality} features have dimension {} but head expects {}",
            features.ncols(),
            head.d_in()
        )));
    }
    let raw = features.dot(&head.weights.t()) + &head.bias;
    let raw_norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = raw_norms.iter().position(|n| !(n.is_finite() && *n > 0.0)) {
        return Err(Error::numerical(format!(
            "{modality} sample {i}: degenerate projection with zero norm"
        )));
    }
    let unit = &raw / &raw_norms.view().insert_axis(Axis(1));
    Ok(Projected { raw_norms, unit })
}

/// Back-propagates `d loss / d unit` through `unit = p / |p|`, `p = W x + b`.
fn head_grad(proj: &Projected, d_unit: &Array2<f64>, features: &Array2<f64>) -> ProjectionHead {
    let mut d_raw = d_unit.clone();
    Zip::from(d_raw.axis_iter_mut(Axis(0)))
        .and(proj.unit.axis_iter(Axis(0)))
        .and(&proj.raw_norms)
        .for_each(|mut g, u, &n| {
            let radial = u.dot(&g);
            g.zip_mut_with(&u, |gk, &uk| *gk = (*gk - radial * uk) / n);
        });
    ProjectionHead {
        weights: d_raw.t().dot(features),
        bias: d_raw.sum_axis(Axis(0)),
    }
}

fn validate_batch(batch: &RawBatch<'_>) -> Result<()> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if batch.images.nrows() != n || batch.texts.nrows() != n {
        return Err(Error::shape(format!(
            "batch has {} images, {} texts and {n} labels",
            batch.images.nrows(),
            batch.texts.nrows()
        )));
    }
    Ok(())
}

/// Objective value only.
pub fn total_loss(model: &ModelState, batch: RawBatch<'_>) -> Result<f64> {
    validate_batch(&batch)?;
    let u = project_batch(&model.vision_head, batch.images, "image")?;
    let v = project_batch(&model.text_head, batch.texts, "text")?;
    let sims = u.unit.dot(&v.unit.t());
    let pos = positive_sets(batch.labels);
    Ok(loss_i2t(&sims, model.log_tau, &pos)? + loss_t2i(&sims, model.log_tau, &pos)?)
}

/// Objective value with exact gradients for both heads and `log_tau`.
pub fn total_loss_and_grads(model: &ModelState, batch: RawBatch<'_>) -> Result<LossGradients> {
    validate_batch(&batch)?;
    let u = project_batch(&model.vision_head, batch.images, "image")?;
    let v = project_batch(&model.text_head, batch.texts, "text")?;
    let sims = u.unit.dot(&v.unit.t());
    let tau = model.log_tau.exp();
    let logits = &sims * tau;
    let pos = positive_sets(batch.labels);

    let lp_rows = log_softmax_rows(&logits);
    let lp_cols = log_softmax_rows(&logits.t().to_owned());
    let loss = directional_loss(&lp_rows, &pos.i2t) + directional_loss(&lp_cols, &pos.t2i);

    let d_logits = logit_grad(&lp_rows, &pos.i2t) + logit_grad(&lp_cols, &pos.t2i).t();
    let d_log_tau = (&d_logits * &logits).sum();
    let d_sims = d_logits * tau;
    let d_u = d_sims.dot(&v.unit);
    let d_v = d_sims.t().dot(&u.unit);

    let grads = LossGradients {
        vision_head: head_grad(&u, &d_u, batch.images),
        text_head: head_grad(&v, &d_v, batch.texts),
        log_tau: d_log_tau,
        loss,
    };
    if !grads.loss.is_finite() || !grads.log_tau.is_finite() {
        return Err(Error::numerical("non-finite loss or temperature gradient"));
    }
    Ok(grads)
}

/// Loss computed from already-normalized embeddings.
pub fn loss_from_embeddings(
    images: &[JointEmbedding],
    texts: &[JointEmbedding],
    labels: &[usize],
    log_tau: f64,
) -> Result<f64> {
    let sims = crate::embedding::similarity_matrix(images, texts)?;
    let pos = positive_sets(labels);
    Ok(loss_i2t(&sims, log_tau, &pos)? + loss_t2i(&sims, log_tau, &pos)?)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_block: &'static str,
}

/// Checks every parameter coordinate with central differences of step `h`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)` where the floor keeps
/// the comparison meaningful for coordinates whose true gradient is ~0.
pub fn gradient_check(model: &ModelState, batch: RawBatch<'_>, h: f64) -> Result<GradCheckReport> {
    let analytic = total_loss_and_grads(model, batch)?;
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst_block: "",
    };
    let mut probe = model.clone();
    let blocks: [(&'static str, &Array2<f64>, &Array1<f64>, bool); 2] = [
        ("vision", &analytic.vision_head.weights, &analytic.vision_head.bias, true),
        ("text", &analytic.text_head.weights, &analytic.text_head.bias, false),
    ];
    let mut record = |name: &'static str, a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        report.coordinates += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_block = name;
        }
    };
    for (name, dw, db, is_vision) in blocks {
        for ((r, c), &a) in dw.indexed_iter() {
            let n = central_difference(&mut probe, batch, h, |m| {
                let head = if is_vision { &mut m.vision_head } else { &mut m.text_head };
                &mut head.weights[[r, c]]
            })?;
            record(name, a, n);
        }
        for (r, &a) in db.indexed_iter() {
            let n = central_difference(&mut probe, batch, h, |m| {
                let head = if is_vision { &mut m.vision_head } else { &mut m.text_head };
                &mut head.bias[r]
            })?;
            record(name, a, n);
        }
    }
    let n = central_difference(&mut probe, batch, h, |m| &mut m.log_tau)?;
    record("log_tau", analytic.log_tau, n);
    Ok(report)
}

fn central_difference(
    model: &mut ModelState,
    batch: RawBatch<'_>,
    h: f64,
    coord: impl Fn(&mut ModelState) -> &mut f64,
) -> Result<f64> {
    let orig = *coord(model);
    *coord(model) = orig + h;
    let plus = total_loss(model, batch)?;
    *coord(model) = orig - h;
    let minus = total_loss(model, batch)?;
    *coord(model) = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Embeds a batch and returns `(images, texts)` as joint embeddings.
pub fn embed_batch(model: &ModelState, batch: RawBatch<'_>) -> Result<(Vec<JointEmbedding>, Vec<JointEmbedding>)> {
    let u = project_batch(&model.vision_head, batch.images, "image")?;
    let v = project_batch(&model.text_head, batch.texts, "text")?;
    let to_vec = |m: &Array2<f64>| {
        m.axis_iter(Axis(0))
            .map(|r: ArrayView1<f64>| JointEmbedding::normalize(r.to_owned()))
            .collect::<Result<Vec<_>>>()
    };
    Ok((to_vec(&u.unit)?, to_vec(&v.unit)?))
}

/// Owned model and batch, for gradient checks and benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProblem {
    pub model: ModelState,
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    pub labels: Vec<usize>,
}

impl RandomProblem {
    /// Batch size in `1..=max_batch`, dimensions in `2..=max_dim`, labels
    /// over three classes, random biases and temperature.
    pub fn generate(seed: u64, max_batch: usize, max_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=max_batch.max(1));
        let hi = max_dim.max(2);
        let (dv, dt, dj) = (rng.random_range(2..=hi), rng.random_range(2..=hi), rng.random_range(2..=hi));
        Self::sized(&mut rng, n, dv, dt, dj, 3)
    }

    /// Fixed shapes with `n_classes` labels drawn uniformly.
    pub fn with_shape(seed: u64, n: usize, d_vision: usize, d_text: usize, d_joint: usize, n_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sized(&mut rng, n, d_vision, d_text, d_joint, n_classes)
    }

    fn sized(rng: &mut ChaCha8Rng, n: usize, dv: usize, dt: usize, dj: usize, n_classes: usize) -> Self {
        let mut model = ModelState::init(dv, dt, dj, rng.random());
        model.vision_head.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        model.text_head.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        model.log_tau = rng.random_range(-0.5..2.0);
        let images = Array2::from_shape_fn((n, dv), |_| rng.sample::<f64, _>(StandardNormal));
        let texts = Array2::from_shape_fn((n, dt), |_| rng.sample::<f64, _>(StandardNormal));
        let labels = (0..n).map(|_| rng.random_range(0..n_classes.max(1))).collect();
        RandomProblem {
            model,
            images,
            texts,
            labels,
        }
    }

    pub fn batch(&self) -> RawBatch<'_> {
        RawBatch {
            images: &self.images,
            texts: &self.texts,
            labels: &self.labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Literal evaluation of the printed sums, one exponential at a time.
    fn enumerate_i2t(s: &Array2<f64>, tau: f64, y: &[usize]) -> f64 {
        let n = s.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&k| y[k] == y[i]).collect();
            let denom: f64 = (0..n).map(|j| (tau * s[[i, j]]).exp()).sum();
            let mut inner = 0.0;
            for &ip in &pos {
                inner += ((tau * s[[i, ip]]).exp() / denom).ln();
            }
            total -= inner / pos.len() as f64;
        }
        total
    }

    fn enumerate_t2i(s: &Array2<f64>, tau: f64, y: &[usize]) -> f64 {
        let n = s.nrows();
        let mut total = 0.0;
        for j in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&k| y[k] == y[j]).collect();
            let denom: f64 = (0..n).map(|i| (tau * s[[i, j]]).exp()).sum();
            let mut inner = 0.0;
            for &jp in &pos {
                inner += ((tau * s[[jp, j]]).exp() / denom).ln();
            }
            total -= inner / pos.len() as f64;
        }
        total
    }

    fn random_units(n: usize, d: usize, rng: &mut impl Rng) -> Vec<JointEmbedding> {
        (0..n)
            .map(|_| JointEmbedding::normalize(Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))).unwrap())
            .collect()
    }

    fn random_model(dv: usize, dt: usize, dj: usize, rng: &mut impl Rng) -> ModelState {
        let mut m = ModelState::init(dv, dt, dj, rng.random());
        m.vision_head.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        m.text_head.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        m.log_tau = rng.random_range(-0.5..2.0);
        m
    }

    #[test]
    fn positive_set_examples() {
        assert_eq!(positive_sets(&[0, 1, 2]).i2t, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(positive_sets(&[5, 5, 5]).i2t, vec![vec![0, 1, 2]; 3]);
        let labels = [0, 1, 0, 2, 1];
        let p = positive_sets(&labels);
        // enumeration over equality pairs
        for i in 0..labels.len() {
            let expect: Vec<usize> = (0..labels.len()).filter(|&k| labels[i] == labels[k]).collect();
            assert_eq!(p.i2t[i], expect);
            assert!(p.i2t[i].contains(&i));
        }
        assert_eq!(p.i2t[0], vec![0, 2]);
        assert_eq!(p.i2t[1], vec![1, 4]);
        assert_eq!(p.i2t[3], vec![3]);
    }

    #[test]
    fn singleton_batch_has_zero_loss() {
        let s = array![[0.3]];
        let p = positive_sets(&[0]);
        assert_eq!(loss_i2t(&s, 1.0, &p).unwrap(), 0.0);
        assert_eq!(loss_t2i(&s, 1.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_hand_value() {
        // sims = I, tau = 1: each row contributes -log(e / (e + 1))
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let p = positive_sets(&[0, 1]);
        let expect = 2.0 * -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((expect - 0.626523).abs() < 1e-6);
        assert!((loss_i2t(&s, 0.0, &p).unwrap() - expect).abs() < 1e-12);
        assert!((loss_t2i(&s, 0.0, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn three_pairs_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_units(3, 4, &mut rng);
        let v = random_units(3, 4, &mut rng);
        let s = crate::embedding::similarity_matrix(&u, &v).unwrap();
        let y = [0, 0, 1];
        let p = positive_sets(&y);
        let lt = 1.3f64;
        assert!((loss_i2t(&s, lt, &p).unwrap() - enumerate_i2t(&s, lt.exp(), &y)).abs() < 1e-10);
        assert!((loss_t2i(&s, lt, &p).unwrap() - enumerate_t2i(&s, lt.exp(), &y)).abs() < 1e-10);
    }

    #[test]
    fn symmetric_configuration_equal_directions() {
        let s = array![[0.9, 0.1, -0.2], [0.1, 0.5, 0.3], [-0.2, 0.3, 0.7]];
        let p = positive_sets(&[0, 1, 0]);
        assert_eq!(loss_i2t(&s, 0.7, &p).unwrap(), loss_t2i(&s, 0.7, &p).unwrap());
    }

    #[test]
    fn empty_positive_set_is_contract_violation() {
        let p = PositiveSets {
            i2t: vec![vec![], vec![1]],
            t2i: vec![vec![0], vec![1]],
        };
        assert!(loss_i2t(&array![[0.0, 0.0], [0.0, 0.0]], 0.0, &p).is_err());
    }

    #[test]
    fn singleton_batch_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(3, 4, 2, &mut rng);
        let images = array![[0.2, -0.1, 0.5]];
        let texts = array![[0.3, 0.1, 0.0, -0.4]];
        let g = total_loss_and_grads(&m, RawBatch { images: &images, texts: &texts, labels: &[0] }).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.log_tau.abs() < 1e-15);
        assert!(g.vision_head.weights.iter().chain(g.text_head.weights.iter()).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn random_small_instance_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = random_model(5, 5, 5, &mut rng);
        let images = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let texts = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 0, 2];
        let r = gradient_check(&m, RawBatch { images: &images, texts: &texts, labels: &labels }, 1e-6).unwrap();
        assert_eq!(r.coordinates, 2 * (25 + 5) + 1);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn loss_value_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(3, 6, 4, &mut rng);
        let images = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let texts = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
        let labels = [1, 1, 0, 2, 0];
        let batch = RawBatch { images: &images, texts: &texts, labels: &labels };
        let g = total_loss_and_grads(&m, batch).unwrap();
        let u = m.vision_head.project_normalize_rows(&images).unwrap();
        let v = m.text_head.project_normalize_rows(&texts).unwrap();
        let s = crate::embedding::similarity_matrix(&u, &v).unwrap();
        let p = positive_sets(&labels);
        let expect = loss_i2t(&s, m.log_tau, &p).unwrap() + loss_t2i(&s, m.log_tau, &p).unwrap();
        assert!((g.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_names_sample() {
        let mut m = ModelState::init(2, 2, 2, 0);
        m.vision_head.weights = array![[1.0, 0.0], [0.0, 1.0]];
        let images = array![[1.0, 1.0], [0.0, 0.0]];
        let texts = array![[1.0, 0.0], [0.0, 1.0]];
        let err = total_loss_and_grads(&m, RawBatch { images: &images, texts: &texts, labels: &[0, 1] }).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref msg) if msg.contains("sample 1")), "{err}");
    }

    #[test]
    fn duplicate_pair_is_in_positive_set_and_loss_is_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_units(3, 4, &mut rng);
        let v = random_units(3, 4, &mut rng);
        let labels = [0, 1, 2];
        let base = loss_from_embeddings(&u, &v, &labels, 1.0).unwrap();
        let mut u2 = u.clone();
        let mut v2 = v.clone();
        u2.push(u[1].clone());
        v2.push(v[1].clone());
        let dup_labels = [0, 1, 2, 1];
        let p = positive_sets(&dup_labels);
        assert_eq!(p.i2t[3], vec![1, 3]);
        assert_eq!(p.i2t[1], vec![1, 3]);
        // a nearly-identical fourth pair gives nearly the same loss as an exact duplicate
        let exact = loss_from_embeddings(&u2, &v2, &dup_labels, 1.0).unwrap();
        let mut u3 = u2.clone();
        u3[3] = JointEmbedding::normalize(u[1].as_array() + &Array1::from_elem(4, 1e-7)).unwrap();
        let near = loss_from_embeddings(&u3, &v2, &dup_labels, 1.0).unwrap();
        assert!((exact - near).abs() < 1e-5);
        assert!(exact.is_finite() && base.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn permutation_equivariant_and_nonnegative(seed in 0u64..10_000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_units(n, 5, &mut rng);
            let v = random_units(n, 5, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let lt = rng.random_range(-1.0..3.0);
            let s = crate::embedding::similarity_matrix(&u, &v).unwrap();
            let p = positive_sets(&labels);
            prop_assert!(loss_i2t(&s, lt, &p).unwrap() >= 0.0);
            prop_assert!(loss_t2i(&s, lt, &p).unwrap() >= 0.0);

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pu: Vec<_> = perm.iter().map(|&i| u[i].clone()).collect();
            let pv: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
            let pl: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
            let a = loss_from_embeddings(&u, &v, &labels, lt).unwrap();
            let b = loss_from_embeddings(&pu, &pv, &pl, lt).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
