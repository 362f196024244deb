//! Multinomial logistic regression on frozen features.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::FeatureChoice;
use crate::error::{Error, Result};
use crate::zeroshot::{argmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iters: 5000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub feature_choice: FeatureChoice,
    pub l2_lambda: f64,
    /// Objective value at every solver iteration, starting from the zero initialization.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Default regularization `1 / (k * n_classes)` for `k` shots per class.
pub fn default_l2_lambda(shots_per_class: usize, n_classes: usize) -> f64 {
    1.0 / (shots_per_class.max(1) * n_classes.max(1)) as f64
}

struct Problem<'a> {
    x: &'a Array2<f64>,
    y: &'a [usize],
    lambda: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy plus `lambda/2 |W|^2`.
    fn objective(&self, w: &Array2<f64>, b: &Array1<f64>) -> f64 {
        let scores = self.x.dot(&w.t()) + b;
        let mut ce = 0.0;
        for (row, &y) in scores.axis_iter(Axis(0)).zip(self.y) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            ce += lse - row[y];
        }
        ce / self.y.len() as f64 + 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &Array2<f64>, b: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let n = self.y.len() as f64;
        let scores = self.x.dot(&w.t()) + b;
        let mut d = Array2::zeros(scores.dim());
        for ((mut drow, row), &y) in d.axis_iter_mut(Axis(0)).zip(scores.axis_iter(Axis(0))).zip(self.y) {
            drow.assign(&softmax(row));
            drow[y] -= 1.0;
        }
        d /= n;
        let gw = d.t().dot(self.x) + &(w * self.lambda);
        let gb = d.sum_axis(Axis(0));
        (gw, gb)
    }
}

/// Full-batch gradient descent with Armijo backtracking from a zero start.
pub fn fit_linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    l2_lambda: f64,
    feature_choice: FeatureChoice,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    if features.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if !(l2_lambda.is_finite() && l2_lambda >= 0.0) {
        return Err(Error::Config(format!("invalid l2 lambda {l2_lambda}")));
    }
    let mut present = vec![false; n_classes];
    for &y in labels {
        *present
            .get_mut(y)
            .ok_or_else(|| Error::Validation(format!("label {y} outside {n_classes} classes")))? = true;
    }
    let missing: Vec<usize> = (0..n_classes).filter(|&c| !present[c]).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("classes absent from support: {missing:?}")));
    }

    let problem = Problem {
        x: features,
        y: labels,
        lambda: l2_lambda,
    };
    let d = features.ncols();
    let mut w = Array2::zeros((n_classes, d));
    let mut b = Array1::zeros(n_classes);
    let mut f = problem.objective(&w, &b);
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..config.max_iters {
        let (gw, gb) = problem.gradient(&w, &b);
        let g2 = gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>();
        if g2.sqrt() < config.grad_tol {
            break;
        }
        step *= 2.0;
        let accepted = loop {
            let w_new = &w - &(&gw * step);
            let b_new = &b - &(&gb * step);
            let f_new = problem.objective(&w_new, &b_new);
            if f_new <= f - 0.5 * step * g2 {
                break Some((w_new, b_new, f_new));
            }
            step *= 0.5;
            if step < 1e-300 {
                break None;
            }
        };
        match accepted {
            Some((w_new, b_new, f_new)) => {
                w = w_new;
                b = b_new;
                f = f_new;
                trace.push(f);
            }
            None => break,
        }
    }
    Ok(LinearProbe {
        weights: w,
        bias: b,
        feature_choice,
        l2_lambda,
        objective_trace: trace,
    })
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, feature: ArrayView1<f64>) -> Result<Array1<f64>> {
        if feature.len() != self.weights.ncols() {
            return Err(Error::shape(format!(
                "probe expects dimension {}, got {}",
                self.weights.ncols(),
                feature.len()
            )));
        }
        Ok(self.weights.dot(&feature) + &self.bias)
    }
}

/// Class with the highest softmax probability and the probabilities.
pub fn predict_linear_probe(probe: &LinearProbe, feature: ArrayView1<f64>) -> Result<(usize, Array1<f64>)> {
    let s = probe.scores(feature)?;
    Ok((argmax(s.view()), softmax(s.view())))
}
