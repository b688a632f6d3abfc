// SPDX-License-Identifier: Apache-2.0

//! Dirichlet-evidential classification.
//!
//! Non-negative evidence `e` becomes Dirichlet concentration `α = e + 1`, so
//! zero evidence is the uniform prior. With `S = Σ_k α_k` the predictive mean
//! is `α / S` and the uncertainty mass is `u = K / S`.
//!
//! Every loss exists twice: as a direct per-sample evaluation over plain
//! tensors, and in [`graph`] as a composition of tape primitives used for
//! training. Tests check the two against each other and the tape gradient
//! against finite differences of the direct form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::special::{ln_gamma, psi};
use crate::numkernel::Tensor;

/// Which Bayesian risk drives the data-fit term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Type-II maximum likelihood (negative log marginal likelihood).
    Ml,
    /// Expected cross-entropy under the Dirichlet.
    Ce,
    /// Expected squared error under the Dirichlet.
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(LossKind::Ml),
            "ce" => Ok(LossKind::Ce),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown evidential loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ml => "ml",
            LossKind::Ce => "ce",
            LossKind::Mse => "mse",
        })
    }
}

/// Per-sample Dirichlet parameters with their strength and uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletBatch {
    alpha: Tensor,
    strength: Vec<f64>,
    uncertainty: Vec<f64>,
}

impl DirichletBatch {
    /// Wraps `[N,K]` concentrations; every entry must be at least 1.
    pub fn from_alpha(alpha: Tensor) -> Result<Self> {
        alpha.expect_rank(2, "alpha")?;
        if alpha.data().iter().any(|&a| !(a >= 1.0 && a.is_finite())) {
            return Err(Error::Domain("alpha entries must be finite and >= 1".into()));
        }
        let k = alpha.shape()[1] as f64;
        let strength: Vec<f64> = alpha.rows().map(|r| r.iter().sum()).collect();
        let uncertainty = strength.iter().map(|s| k / s).collect();
        Ok(DirichletBatch {
            alpha,
            strength,
            uncertainty,
        })
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    /// `S_i = Σ_k α_ik`.
    pub fn strength(&self) -> &[f64] {
        &self.strength
    }

    pub fn uncertainty(&self) -> &[f64] {
        &self.uncertainty
    }

    pub fn n(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.alpha.shape()[1]
    }
}

/// Class indices with their class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    k: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Domain(format!("label {bad} outside [0, {k})")));
        }
        Ok(LabelBatch { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Tensor {
        let mut data = vec![0.0; self.labels.len() * self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * self.k + l] = 1.0;
        }
        Tensor::new(vec![self.labels.len(), self.k], data).expect("one-hot shape")
    }
}

/// Linear warm-up of the KL weight: `min(1, t / horizon)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub epoch: usize,
    pub horizon: usize,
}

impl AnnealSchedule {
    pub const DEFAULT_HORIZON: usize = 10;

    pub fn at(epoch: usize) -> Self {
        AnnealSchedule {
            epoch,
            horizon: Self::DEFAULT_HORIZON,
        }
    }
}

pub fn anneal_coeff(s: AnnealSchedule) -> f64 {
    if s.horizon == 0 {
        return 1.0;
    }
    (s.epoch as f64 / s.horizon as f64).min(1.0)
}

pub fn evidence_to_alpha(evidence: &Tensor) -> Result<DirichletBatch> {
    evidence.expect_rank(2, "evidence")?;
    if evidence.data().iter().any(|&e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::Domain("evidence must be finite and non-negative".into()));
    }
    DirichletBatch::from_alpha(evidence.map(|e| e + 1.0))
}

/// Dirichlet mean `α / S`, row by row.
pub fn predict_mean(d: &DirichletBatch) -> Tensor {
    let k = d.k();
    let mut data = Vec::with_capacity(d.n() * k);
    for (row, s) in d.alpha.rows().zip(&d.strength) {
        data.extend(row.iter().map(|a| a / s));
    }
    Tensor::new(vec![d.n(), k], data).expect("mean shape")
}

pub fn uncertainty(d: &DirichletBatch) -> Tensor {
    Tensor::vector(d.uncertainty.clone())
}

fn check_pair(d: &DirichletBatch, y: &LabelBatch) -> Result<()> {
    if d.n() != y.len() || d.k() != y.k() {
        return Err(Error::Shape(format!(
            "dirichlet [{}, {}] vs labels [{}] with K={}",
            d.n(),
            d.k(),
            y.len(),
            y.k()
        )));
    }
    Ok(())
}

/// Type-II maximum likelihood: `log S_i - log α_{i,y_i}`.
pub fn loss_ml(d: &DirichletBatch, y: &LabelBatch) -> Result<Tensor> {
    check_pair(d, y)?;
    Ok(Tensor::vector(
        d.alpha
            .rows()
            .zip(&d.strength)
            .zip(y.labels())
            .map(|((row, s), &l)| s.ln() - row[l].ln())
            .collect(),
    ))
}

/// Expected cross-entropy: `ψ(S_i) - ψ(α_{i,y_i})`.
pub fn loss_ce(d: &DirichletBatch, y: &LabelBatch) -> Result<Tensor> {
    check_pair(d, y)?;
    Ok(Tensor::vector(
        d.alpha
            .rows()
            .zip(&d.strength)
            .zip(y.labels())
            .map(|((row, s), &l)| psi(*s) - psi(row[l]))
            .collect(),
    ))
}

/// Expected squared error: squared bias of the mean plus its variance.
pub fn loss_mse(d: &DirichletBatch, y: &LabelBatch) -> Result<Tensor> {
    check_pair(d, y)?;
    Ok(Tensor::vector(
        d.alpha
            .rows()
            .zip(&d.strength)
            .zip(y.labels())
            .map(|((row, s), &l)| {
                row.iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let p = a / s;
                        let target = if k == l { 1.0 } else { 0.0 };
                        (target - p).powi(2) + p * (1.0 - p) / (s + 1.0)
                    })
                    .sum()
            })
            .collect(),
    ))
}

/// Concentrations with the true-class entry reset to 1, leaving only the
/// evidence placed on wrong classes.
pub fn alpha_tilde(d: &DirichletBatch, y: &LabelBatch) -> Result<Tensor> {
    check_pair(d, y)?;
    let mut out = d.alpha.clone();
    let k = d.k();
    for (i, &l) in y.labels().iter().enumerate() {
        out.data_mut()[i * k + l] = 1.0;
    }
    Ok(out)
}

/// `KL[Dir(α̃) || Dir(1)]` per row.
pub fn kl_to_uniform(alpha_tilde: &Tensor) -> Result<Tensor> {
    alpha_tilde.expect_rank(2, "alpha_tilde")?;
    if alpha_tilde.data().iter().any(|&a| !(a >= 1.0 && a.is_finite())) {
        return Err(Error::Domain("alpha_tilde entries must be >= 1".into()));
    }
    let k = alpha_tilde.shape()[1] as f64;
    Ok(Tensor::vector(
        alpha_tilde
            .rows()
            .map(|row| {
                let s: f64 = row.iter().sum();
                let psi_s = psi(s);
                let mut kl = ln_gamma(s) - ln_gamma(k);
                for &a in row {
                    kl += -ln_gamma(a) + (a - 1.0) * (psi(a) - psi_s);
                }
                kl
            })
            .collect(),
    ))
}

pub fn risk(d: &DirichletBatch, y: &LabelBatch, kind: LossKind) -> Result<Tensor> {
    match kind {
        LossKind::Ml => loss_ml(d, y),
        LossKind::Ce => loss_ce(d, y),
        LossKind::Mse => loss_mse(d, y),
    }
}

/// `Σ_i risk_i + λ_t Σ_i KL_i`, summed over the batch (not averaged).
pub fn evidential_total(
    d: &DirichletBatch,
    y: &LabelBatch,
    s: AnnealSchedule,
    kind: LossKind,
) -> Result<f64> {
    let data_fit = risk(d, y, kind)?.sum();
    let lambda = anneal_coeff(s);
    if lambda == 0.0 {
        return Ok(data_fit);
    }
    let kl = kl_to_uniform(&alpha_tilde(d, y)?)?.sum();
    Ok(data_fit + lambda * kl)
}

/// The same losses as tape compositions, for training.
pub mod graph {
    use super::LossKind;
    use crate::error::Result;
    use crate::numkernel::{Tape, Tensor, Var};

    pub fn evidence_to_alpha(tape: &mut Tape, evidence: Var) -> Var {
        tape.add_scalar(evidence, 1.0)
    }

    /// Per-sample risk `[N]` for `alpha [N,K]` and a one-hot constant.
    pub fn risk(tape: &mut Tape, alpha: Var, one_hot: Var, kind: LossKind) -> Result<Var> {
        let k = tape.shape(alpha)[1];
        let strength = tape.sum_cols(alpha)?;
        match kind {
            LossKind::Ml => {
                let ln_s = tape.ln(strength)?;
                let ln_a = tape.ln(alpha)?;
                let picked = tape.mul(one_hot, ln_a)?;
                let true_term = tape.sum_cols(picked)?;
                tape.sub(ln_s, true_term)
            }
            LossKind::Ce => {
                let psi_s = tape.digamma(strength)?;
                let psi_a = tape.digamma(alpha)?;
                let picked = tape.mul(one_hot, psi_a)?;
                let true_term = tape.sum_cols(picked)?;
                tape.sub(psi_s, true_term)
            }
            LossKind::Mse => {
                let s_wide = tape.broadcast_cols(strength, k)?;
                let p = tape.div(alpha, s_wide)?;
                let err = tape.sub(one_hot, p)?;
                let err2 = tape.square(err)?;
                let bias = tape.sum_cols(err2)?;
                let neg_p = tape.scale(p, -1.0);
                let one_minus = tape.add_scalar(neg_p, 1.0);
                let pq = tape.mul(p, one_minus)?;
                let pq_sum = tape.sum_cols(pq)?;
                let s_plus = tape.add_scalar(strength, 1.0);
                let var = tape.div(pq_sum, s_plus)?;
                tape.add(bias, var)
            }
        }
    }

    /// `y + (1 - y) ⊙ α`.
    pub fn alpha_tilde(tape: &mut Tape, alpha: Var, one_hot: &Tensor) -> Result<Var> {
        let keep = tape.constant(one_hot.map(|y| 1.0 - y));
        let y = tape.constant(one_hot.clone());
        let masked = tape.mul(keep, alpha)?;
        tape.add(y, masked)
    }

    pub fn kl_to_uniform(tape: &mut Tape, alpha_tilde: Var) -> Result<Var> {
        let k = tape.shape(alpha_tilde)[1];
        let s = tape.sum_cols(alpha_tilde)?;
        let lg_s = tape.lgamma(s)?;
        let lg_a = tape.lgamma(alpha_tilde)?;
        let lg_a_sum = tape.sum_cols(lg_a)?;
        let psi_a = tape.digamma(alpha_tilde)?;
        let psi_s = tape.digamma(s)?;
        let psi_s_wide = tape.broadcast_cols(psi_s, k)?;
        let dpsi = tape.sub(psi_a, psi_s_wide)?;
        let a_minus = tape.add_scalar(alpha_tilde, -1.0);
        let cross = tape.mul(a_minus, dpsi)?;
        let cross_sum = tape.sum_cols(cross)?;
        let head = tape.sub(lg_s, lg_a_sum)?;
        let head = tape.add_scalar(head, -crate::numkernel::special::ln_gamma(k as f64));
        tape.add(head, cross_sum)
    }

    /// Scalar `Σ risk + λ_t Σ KL`.
    pub fn total(
        tape: &mut Tape,
        alpha: Var,
        one_hot: &Tensor,
        lambda_t: f64,
        kind: LossKind,
    ) -> Result<Var> {
        let y = tape.constant(one_hot.clone());
        let r = risk(tape, alpha, y, kind)?;
        let data_fit = tape.sum_all(r);
        if lambda_t == 0.0 {
            return Ok(data_fit);
        }
        let at = alpha_tilde(tape, alpha, one_hot)?;
        let kl = kl_to_uniform(tape, at)?;
        let kl_sum = tape.sum_all(kl);
        let weighted = tape.scale(kl_sum, lambda_t);
        tape.add(data_fit, weighted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{compare_with_fd, Tape};
    use crate::SeededRng;
    use rand::{Rng, SeedableRng};

    fn dir(rows: &[Vec<f64>]) -> DirichletBatch {
        DirichletBatch::from_alpha(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn labels(l: &[usize], k: usize) -> LabelBatch {
        LabelBatch::new(l.to_vec(), k).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn evidence_mapping_examples() {
        let d = evidence_to_alpha(&Tensor::zeros(&[1, 6])).unwrap();
        assert_eq!(d.alpha().data(), &[1.0; 6]);
        assert_eq!(d.strength(), &[6.0]);
        assert_eq!(d.uncertainty(), &[1.0]);

        let d = evidence_to_alpha(&Tensor::from_rows(&[vec![9.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(d.alpha().data(), &[10.0, 1.0, 1.0]);
        assert_eq!(d.strength(), &[12.0]);
        assert_eq!(d.uncertainty(), &[0.25]);

        let d = evidence_to_alpha(&Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!((d.strength()[0], d.uncertainty()[0]), (4.0, 0.5));
    }

    #[test]
    fn negative_or_nan_evidence_rejected() {
        for bad in [-0.1, f64::NAN, f64::INFINITY] {
            let e = Tensor::from_rows(&[vec![1.0, bad]]).unwrap();
            assert!(matches!(evidence_to_alpha(&e), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn predictive_mean_examples() {
        let p = predict_mean(&dir(&[vec![1.0, 1.0, 1.0], vec![10.0, 1.0, 1.0]]));
        let third = 1.0 / 3.0;
        assert_eq!(p.row(0), &[third, third, third]);
        assert_eq!(p.row(1), &[10.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0]);
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty(&dir(&[vec![1.0; 6]])).data(), &[1.0]);
        assert_eq!(uncertainty(&dir(&[vec![4.0; 3]])).data(), &[0.25]);
        let base = uncertainty(&dir(&[vec![2.0, 3.0]])).data()[0];
        let more = uncertainty(&dir(&[vec![2.0, 3.5]])).data()[0];
        assert!(more < base);
    }

    #[test]
    fn loss_ml_examples() {
        let v = loss_ml(&dir(&[vec![1.0, 1.0], vec![3.0, 1.0]]), &labels(&[0, 0], 2)).unwrap();
        assert!((v.data()[0] - LN2).abs() < 1e-12);
        assert!((v.data()[1] - (4f64.ln() - 3f64.ln())).abs() < 1e-12);
        assert!((v.data()[1] - 0.287_682_1).abs() < 1e-7);
        let v = loss_ml(&dir(&[vec![2.5; 5]]), &labels(&[3], 5)).unwrap();
        assert!((v.data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_ce_examples() {
        let v = loss_ce(
            &dir(&[vec![2.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]),
            &labels(&[0, 0, 1], 2),
        )
        .unwrap();
        assert!((v.data()[0] - 0.5).abs() < 1e-12);
        assert!((v.data()[1] - 1.0).abs() < 1e-12);
        assert!((v.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_mse_examples() {
        let v = loss_mse(&dir(&[vec![1.0, 1.0]]), &labels(&[0], 2)).unwrap();
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        let sym = dir(&[vec![3.0; 4]]);
        let a = loss_mse(&sym, &labels(&[0], 4)).unwrap().data()[0];
        let b = loss_mse(&sym, &labels(&[2], 4)).unwrap().data()[0];
        assert!((a - b).abs() < 1e-12);
        let big = loss_mse(&dir(&[vec![1e9, 1.0, 1.0]]), &labels(&[0], 3)).unwrap();
        assert!(big.data()[0] < 1e-8);
    }

    #[test]
    fn alpha_tilde_examples() {
        let t = alpha_tilde(&dir(&[vec![5.0, 2.0, 3.0]]), &labels(&[0], 3)).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
        let t = alpha_tilde(&dir(&[vec![1.0; 3]]), &labels(&[1], 3)).unwrap();
        assert_eq!(t.data(), &[1.0; 3]);
        let t = alpha_tilde(&dir(&[vec![2.0, 7.0]]), &labels(&[1], 2)).unwrap();
        assert_eq!(t.data(), &[2.0, 1.0]);
    }

    #[test]
    fn kl_examples() {
        for k in 2..7 {
            let kl = kl_to_uniform(&Tensor::ones(&[1, k])).unwrap();
            assert!(kl.data()[0].abs() < 1e-12);
        }
        let kl = kl_to_uniform(&Tensor::from_rows(&[vec![2.0, 1.0]]).unwrap()).unwrap();
        assert!((kl.data()[0] - (LN2 - 0.5)).abs() < 1e-12);
        assert!(matches!(
            kl_to_uniform(&Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_zero_only_at_ones() {
        let grid = [1.0, 1.001, 1.5, 2.0, 4.0];
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let kl = kl_to_uniform(&Tensor::from_rows(&[vec![a, b, c]]).unwrap()).unwrap();
                    let v = kl.data()[0];
                    assert!(v >= -1e-12);
                    if a == 1.0 && b == 1.0 && c == 1.0 {
                        assert!(v.abs() < 1e-12);
                    } else {
                        assert!(v > 1e-12, "KL({a},{b},{c}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn annealing_examples() {
        assert_eq!(anneal_coeff(AnnealSchedule::at(0)), 0.0);
        assert_eq!(anneal_coeff(AnnealSchedule::at(5)), 0.5);
        assert_eq!(anneal_coeff(AnnealSchedule::at(20)), 1.0);
        let mut prev = 0.0;
        for t in 0..30 {
            let c = anneal_coeff(AnnealSchedule::at(t));
            assert!((0.0..=1.0).contains(&c) && c >= prev);
            prev = c;
        }
    }

    #[test]
    fn total_examples() {
        let d = dir(&[vec![2.0, 1.0]]);
        let y = labels(&[0], 2);
        let t0 = evidential_total(&d, &y, AnnealSchedule::at(0), LossKind::Ce).unwrap();
        assert_eq!(t0, loss_ce(&d, &y).unwrap().sum());
        // the true class carries all the evidence, so α̃ = (1,1) and KL vanishes
        let t10 = evidential_total(&d, &y, AnnealSchedule::at(10), LossKind::Ce).unwrap();
        assert!((t10 - 0.5).abs() < 1e-12);
        // evidence on the wrong class: ψ(3) - ψ(1) plus KL(2,1) = ln 2 - 1/2
        let wrong = evidential_total(&d, &labels(&[1], 2), AnnealSchedule::at(10), LossKind::Ce).unwrap();
        assert!((wrong - (1.5 + LN2 - 0.5)).abs() < 1e-12);
        let dd = dir(&[vec![2.0, 1.0], vec![2.0, 1.0]]);
        let yy = labels(&[0, 0], 2);
        let t = evidential_total(&dd, &yy, AnnealSchedule::at(12), LossKind::Ce).unwrap();
        assert!((t - 2.0 * t10).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let d = dir(&[vec![2.0, 1.0]]);
        assert!(matches!(loss_ce(&d, &labels(&[0, 1], 2)), Err(Error::Shape(_))));
        assert!(matches!(loss_ml(&d, &labels(&[0], 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_minimised_by_concentrating_on_truth() {
        // S fixed at 9 for K=3; move mass between the true class and the others
        for kind in [LossKind::Ml, LossKind::Ce, LossKind::Mse] {
            let y = labels(&[0], 3);
            let mut best = (f64::INFINITY, 0.0);
            let mut a0 = 1.0;
            while a0 <= 7.0 + 1e-9 {
                let rest = (9.0 - a0) / 2.0;
                let v = risk(&dir(&[vec![a0, rest, rest]]), &y, kind).unwrap().data()[0];
                assert!(v < best.0, "{kind}: risk not decreasing at α_true = {a0}");
                best = (v, a0);
                a0 += 0.25;
            }
            assert_eq!(best.1, 7.0, "{kind}");
        }
    }

    fn random_batch(rng: &mut SeededRng, n: usize, k: usize) -> (Tensor, LabelBatch) {
        let ev = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(0.0..6.0)).collect()).unwrap();
        let y = LabelBatch::new((0..n).map(|_| rng.gen_range(0..k)).collect(), k).unwrap();
        (ev, y)
    }

    #[test]
    fn graph_matches_direct() {
        let mut rng = SeededRng::seed_from_u64(1);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let (ev, y) = random_batch(&mut rng, 5, k);
            let d = evidence_to_alpha(&ev).unwrap();
            for kind in [LossKind::Ml, LossKind::Ce, LossKind::Mse] {
                let mut tape = Tape::new();
                let e = tape.constant(ev.clone());
                let a = graph::evidence_to_alpha(&mut tape, e);
                let oh = tape.constant(y.one_hot());
                let r = graph::risk(&mut tape, a, oh, kind).unwrap();
                let direct = risk(&d, &y, kind).unwrap();
                for (g, w) in tape.value(r).data().iter().zip(direct.data()) {
                    assert!((g - w).abs() < 1e-12);
                }
                let sched = AnnealSchedule::at(rng.gen_range(0..15));
                let tot = graph::total(&mut tape, a, &y.one_hot(), anneal_coeff(sched), kind).unwrap();
                let want = evidential_total(&d, &y, sched, kind).unwrap();
                assert!((tape.value(tot).item().unwrap() - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_fd_of_direct_forms() {
        let mut rng = SeededRng::seed_from_u64(2);
        for _ in 0..100 {
            let k = rng.gen_range(2..5);
            let (ev, y) = random_batch(&mut rng, 3, k);
            let ev = ev.map(|e| e + 0.05);
            for kind in [LossKind::Ml, LossKind::Ce, LossKind::Mse] {
                let mut tape = Tape::new();
                let e = tape.leaf(ev.clone());
                let a = graph::evidence_to_alpha(&mut tape, e);
                let oh = tape.constant(y.one_hot());
                let r = graph::risk(&mut tape, a, oh, kind).unwrap();
                let s = tape.sum_all(r);
                let g = tape.backward(s).unwrap().wrt(e);
                let err = compare_with_fd(
                    &g,
                    |p| Ok(risk(&evidence_to_alpha(p)?, &y, kind)?.sum()),
                    &ev,
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-4, "{kind}: {err}");
            }
            let at = ev.map(|e| e + 1.0);
            let mut tape = Tape::new();
            let a = tape.leaf(at.clone());
            let kl = graph::kl_to_uniform(&mut tape, a).unwrap();
            let s = tape.sum_all(kl);
            let g = tape.backward(s).unwrap().wrt(a);
            let err = compare_with_fd(&g, |p| Ok(kl_to_uniform(p)?.sum()), &at, 1e-5).unwrap();
            assert!(err <= 1e-4, "kl: {err}");
        }
    }

    #[test]
    fn mean_argmax_matches_alpha_argmax() {
        let mut rng = SeededRng::seed_from_u64(4);
        let (ev, _) = random_batch(&mut rng, 50, 4);
        let d = evidence_to_alpha(&ev).unwrap();
        let p = predict_mean(&d);
        let argmax = |r: &[f64]| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        for i in 0..50 {
            assert_eq!(argmax(p.row(i)), argmax(d.alpha().row(i)));
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let u = d.uncertainty()[i];
            assert!(u > 0.0 && u <= 1.0);
        }
    }
}
