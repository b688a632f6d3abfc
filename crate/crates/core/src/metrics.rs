// SPDX-License-Identifier: Apache-2.0

//! Classification and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_UNCERTAINTY_BINS: usize = 30;
const ROW_SUM_TOL: f64 = 1e-6;

fn check_classes(pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= k) {
        return Err(Error::Domain(format!("class {bad} outside [0, {k})")));
    }
    Ok(())
}

/// `m[i][j]` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    check_classes(pred, truth, k)?;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 with the zero-division convention: a class with no true
/// positives scores 0, including one absent from both predictions and truth.
pub fn per_class_f1(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<f64>> {
    let m = confusion_matrix(pred, truth, k)?;
    Ok((0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: u64 = (0..k).map(|i| m[i][c]).sum();
            let actual: u64 = m[c].iter().sum();
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (predicted + actual) as f64
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over all `k` classes.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let f = per_class_f1(pred, truth, k)?;
    Ok(f.iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Index of the right-closed bin `((b-1)/B, b/B]` holding `v ∈ (0, 1]`.
fn right_closed_bin(v: f64, bins: usize) -> usize {
    let b = (v * bins as f64).ceil() as usize;
    b.clamp(1, bins) - 1
}

/// Expected calibration error with equal-width, right-closed bins on (0,1].
pub fn ece(probs: &Tensor, truth: &[usize], bins: usize) -> Result<Calibration> {
    if bins == 0 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    if probs.ndim() != 2 || probs.shape()[0] != truth.len() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs {} labels",
            probs.shape(),
            truth.len()
        )));
    }
    let k = probs.shape()[1];
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (i, (row, &t)) in probs.rows().zip(truth).enumerate() {
        if t >= k {
            return Err(Error::Domain(format!("class {t} outside [0, {k})")));
        }
        let s: f64 = row.iter().sum();
        if !((s - 1.0).abs() <= ROW_SUM_TOL) || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain(format!("row {i} is not a distribution (sum {s})")));
        }
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        let b = right_closed_bin(row[best], bins);
        count[b] += 1;
        conf_sum[b] += row[best];
        if best == t {
            correct[b] += 1;
        }
    }
    let n = truth.len().max(1) as f64;
    let mut total = 0.0;
    let table = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            };
            total += count[b] as f64 / n * (accuracy - mean_confidence).abs();
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(Calibration {
        ece: total,
        bins: table,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    pub domain: String,
    pub mean: f64,
    /// Fraction of samples per equal-width right-closed bin on (0,1].
    pub histogram: Vec<f64>,
}

pub fn uncertainty_stats(u: &[f64], domain: &str, bins: usize) -> Result<UncertaintyStats> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if u.is_empty() {
        return Err(Error::Domain("no uncertainty values".into()));
    }
    if let Some(bad) = u.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Domain(format!("uncertainty {bad} outside (0, 1]")));
    }
    let mut hist = vec![0.0; bins];
    for &v in u {
        hist[right_closed_bin(v, bins)] += 1.0;
    }
    let n = u.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(UncertaintyStats {
        domain: domain.to_string(),
        mean: u.iter().sum::<f64>() / n,
        histogram: hist,
    })
}

/// Ranks starting at 1, ties receiving the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// A constant argument has no defined correlation and yields 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Shape(format!("need at least 3 pairs, got {}", xs.len())));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Everything reported for one labelled evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    /// Calibration of the reported prediction head.
    pub calibration: Calibration,
    pub softmax_calibration: Calibration,
    pub evidential_calibration: Calibration,
    pub uncertainty: UncertaintyStats,
    pub f1_convention: String,
}

pub const F1_CONVENTION: &str = "classes without true positives score F1 = 0";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let v = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((v - 0.7333).abs() < 1e-4);
        let absent = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 3).unwrap();
        assert!((absent - (2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-12);
        assert!(matches!(macro_f1(&[3], &[0], 3), Err(Error::Domain(_))));
    }

    #[test]
    fn confusion_cases() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(m, vec![vec![1, 0], vec![0, 2]]);
        let m = confusion_matrix(&[0, 0, 0, 0], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![2, 0, 0], vec![1, 0, 0]]);
        assert_eq!(m.iter().flatten().sum::<u64>(), 4);
    }

    #[test]
    fn ece_cases() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(ece(&p, &[0, 1], 10).unwrap().ece, 0.0);
        assert_eq!(ece(&p, &[1, 0], 10).unwrap().ece, 1.0);
        let p = Tensor::from_rows(&[
            vec![0.9, 0.1],
            vec![0.1, 0.9],
            vec![0.6, 0.4],
            vec![0.4, 0.6],
        ])
        .unwrap();
        // with two bins 0.6 and 0.9 share (0.5, 1] and the gaps cancel
        let c = ece(&p, &[0, 1, 0, 0], 2).unwrap();
        assert!(c.ece.abs() < 1e-12);
        assert_eq!(c.bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 4]);
        let c = ece(&p, &[0, 1, 0, 0], 10).unwrap();
        assert!((c.ece - 0.1).abs() < 1e-12);
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(ece(&bad, &[0], 10), Err(Error::Domain(_))));
    }

    #[test]
    fn right_closed_edges() {
        assert_eq!(right_closed_bin(0.5, 2), 0);
        assert_eq!(right_closed_bin(0.5000001, 2), 1);
        assert_eq!(right_closed_bin(1.0, 10), 9);
        assert_eq!(right_closed_bin(1e-9, 10), 0);
    }

    #[test]
    fn calibrated_generator_has_small_ece() {
        let mut rng = crate::SeededRng::seed_from_u64(11);
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|v| v / s).collect();
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = 2;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if r < acc {
                    y = j;
                    break;
                }
            }
            rows.push(p);
            truth.push(y);
        }
        let c = ece(&Tensor::from_rows(&rows).unwrap(), &truth, 10).unwrap();
        assert!(c.ece <= 0.01, "{}", c.ece);
    }

    #[test]
    fn uncertainty_cases() {
        let s = uncertainty_stats(&[1.0, 1.0], "t", 30).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.histogram[29], 1.0);
        let grid: Vec<f64> = (1..=300).map(|i| i as f64 / 300.0).collect();
        let s = uncertainty_stats(&grid, "s", 30).unwrap();
        assert!(s.histogram.iter().all(|&h| (h - 1.0 / 30.0).abs() < 1e-12));
        assert!((s.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(uncertainty_stats(&[0.0], "s", 30).is_err());
        assert!(uncertainty_stats(&[1.2], "s", 30).is_err());
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(spearman(&x, &x[..3]), Err(Error::Shape(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn macro_f1_is_permutation_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
            rot in 0usize..40,
        ) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let a = macro_f1(&p, &t, 4).unwrap();
            let r = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(r);
            t2.rotate_left(r);
            prop_assert!((a - macro_f1(&p2, &t2, 4).unwrap()).abs() < 1e-12);
            let m = confusion_matrix(&p, &t, 4).unwrap();
            let present: Vec<usize> = (0..4).filter(|&c| t.contains(&c) || p.contains(&c)).collect();
            let diagonal = (0..4).all(|i| (0..4).all(|j| i == j || m[i][j] == 0));
            let all_present = present.len() == 4;
            prop_assert_eq!(a == 1.0, diagonal && all_present);
        }

        #[test]
        fn ece_invariant_to_relabeling(
            rows in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0, 0usize..3), 1..30),
        ) {
            let probs: Vec<Vec<f64>> = rows.iter().map(|&(a, b, c, _)| {
                let s = a + b + c;
                vec![a / s, b / s, c / s]
            }).collect();
            let truth: Vec<usize> = rows.iter().map(|r| r.3).collect();
            let base = ece(&Tensor::from_rows(&probs).unwrap(), &truth, 10).unwrap().ece;
            prop_assert!((0.0..=1.0).contains(&base));
            let perm = [2usize, 0, 1];
            let probs2: Vec<Vec<f64>> = probs.iter().map(|r| {
                let mut o = vec![0.0; 3];
                for j in 0..3 { o[perm[j]] = r[j]; }
                o
            }).collect();
            let truth2: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
            let relabeled = ece(&Tensor::from_rows(&probs2).unwrap(), &truth2, 10).unwrap().ece;
            prop_assert!((base - relabeled).abs() < 1e-12);
        }

        #[test]
        fn spearman_bounded_and_antisymmetric(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..30),
            seed in 0u64..1000,
        ) {
            let mut rng = crate::SeededRng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let r = spearman(&xs, &ys).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            let neg: Vec<f64> = ys.iter().map(|v| -v).collect();
            prop_assert!((r + spearman(&xs, &neg).unwrap()).abs() < 1e-12);
        }
    }
}
