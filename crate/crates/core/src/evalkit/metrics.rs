//! Balanced accuracy, quadratic-weighted Cohen kappa and ROC AUC.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} true labels for {b} predictions")));
    }
    if a == 0 {
        return Err(Error::Validation("metric over an empty set".into()));
    }
    Ok(())
}

/// Within-class accuracy for every class present in `y_true`.
pub fn per_class_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_lengths(y_true.len(), y_pred.len())?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = counts.entry(t).or_default();
        e.0 += 1;
        if t == p {
            e.1 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(c, (n, hit))| (c, hit as f64 / n as f64))
        .collect())
}

/// Unweighted mean of per-class accuracies.
pub fn metric_aca(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let per_class = per_class_accuracy(y_true, y_pred)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Quadratic-weighted Cohen kappa over grades `0..n_grades`.
pub fn metric_quadratic_kappa(y_true: &[usize], y_pred: &[usize], n_grades: usize) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    if n_grades == 0 {
        return Err(Error::Config("kappa needs at least one grade".into()));
    }
    if let Some(bad) = y_true.iter().chain(y_pred).find(|&&g| g >= n_grades) {
        return Err(Error::Validation(format!("grade {bad} outside 0..{n_grades}")));
    }
    let n = y_true.len() as f64;
    let mut observed = vec![vec![0.0; n_grades]; n_grades];
    let mut rows = vec![0.0; n_grades];
    let mut cols = vec![0.0; n_grades];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        observed[t][p] += 1.0;
        rows[t] += 1.0;
        cols[p] += 1.0;
    }
    let scale = if n_grades > 1 { ((n_grades - 1) * (n_grades - 1)) as f64 } else { 1.0 };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n_grades {
        for j in 0..n_grades {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            num += w * observed[i][j];
            den += w * rows[i] * cols[j] / n;
        }
    }
    if den == 0.0 {
        // a single grade on both sides: perfect agreement by convention
        return if num == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::numerical("kappa undefined: degenerate marginals"))
        };
    }
    Ok(1.0 - num / den)
}

/// Probability that a positive outscores a negative, ties counting one half.
pub fn metric_auc(y_true: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), scores.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::numerical(format!("score {i} is not finite")));
    }
    let n_pos = y_true.iter().filter(|&&y| y).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += midrank * order[start..end].iter().filter(|&&i| y_true[i]).count() as f64;
        start = end;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auc_pairwise(y: &[bool], s: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        wins += 1.0;
                    } else if s[i] == s[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn aca_cases() {
        assert_eq!(metric_aca(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let mut t = vec![0; 90];
        t.extend(vec![1; 10]);
        assert_eq!(metric_aca(&t, &[0; 100]).unwrap(), 0.5);
        assert!(metric_aca(&[], &[]).is_err());
        assert!(metric_aca(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn kappa_reversed_grades() {
        // O is the anti-diagonal; marginals all 1, N = 5
        let t = [0, 1, 2, 3, 4];
        let p = [4, 3, 2, 1, 0];
        let mut num = 0.0;
        for i in 0..5 {
            num += ((i as f64 - (4 - i) as f64).powi(2)) / 16.0;
        }
        let mut den = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                den += ((i as f64 - j as f64).powi(2)) / 16.0 / 5.0;
            }
        }
        let k = metric_quadratic_kappa(&t, &p, 5).unwrap();
        assert!((k - (1.0 - num / den)).abs() < 1e-12);
        assert!((k + 1.0).abs() < 1e-12, "{k}");
    }

    #[test]
    fn kappa_degenerate_single_grade() {
        assert_eq!(metric_quadratic_kappa(&[2, 2, 2], &[2, 2, 2], 5).unwrap(), 1.0);
        assert!(metric_quadratic_kappa(&[0, 5], &[0, 0], 5).is_err());
    }

    #[test]
    fn kappa_of_independence_product_is_zero() {
        // rows (2, 1) and columns (1, 2) with O = r c^T / N scaled to N = 9
        let mut t = Vec::new();
        let mut p = Vec::new();
        let r = [2usize, 1];
        let c = [1usize, 2];
        for i in 0..2 {
            for j in 0..2 {
                for _ in 0..(r[i] * c[j]) {
                    t.push(i);
                    p.push(j);
                }
            }
        }
        assert!(metric_quadratic_kappa(&t, &p, 2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(metric_auc(&[false, false, true, true], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(metric_auc(&[false, true, true, false], &[0.3; 4]).unwrap(), 0.5);
        assert!(metric_auc(&[true, true], &[0.1, 0.2]).is_err());
        assert!(metric_auc(&[true, false], &[f64::NAN, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn aca_invariant_to_class_replication(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            m in 1usize..5,
        ) {
            let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let class = t[0];
            let mut t2 = t.clone();
            let mut p2 = p.clone();
            for (a, b) in t.iter().zip(&p) {
                if *a == class {
                    for _ in 1..m {
                        t2.push(*a);
                        p2.push(*b);
                    }
                }
            }
            let a1 = metric_aca(&t, &p).unwrap();
            let a2 = metric_aca(&t2, &p2).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-12);
        }

        #[test]
        fn kappa_diagonal_is_one(t in prop::collection::vec(0usize..5, 2..40)) {
            prop_assume!(t.iter().any(|&g| g != t[0]));
            prop_assert!((metric_quadratic_kappa(&t, &t, 5).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kappa_in_range(pairs in prop::collection::vec((0usize..5, 0usize..5), 2..50)) {
            let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            if let Ok(k) = metric_quadratic_kappa(&t, &p, 5) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
            }
        }

        #[test]
        fn auc_matches_pairwise_and_monotone_transform(
            items in prop::collection::vec((any::<bool>(), 0i32..10), 2..50),
        ) {
            let y: Vec<bool> = items.iter().map(|i| i.0).collect();
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let s: Vec<f64> = items.iter().map(|i| i.1 as f64 / 3.0).collect();
            let auc = metric_auc(&y, &s).unwrap();
            prop_assert!((auc - auc_pairwise(&y, &s)).abs() < 1e-12);
            let s2: Vec<f64> = s.iter().map(|v| v.exp() * 5.0 - 2.0).collect();
            prop_assert!((auc - metric_auc(&y, &s2).unwrap()).abs() < 1e-12);
        }
    }
}
