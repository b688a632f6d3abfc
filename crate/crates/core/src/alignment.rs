// SPDX-License-Identifier: Apache-2.0

//! Domain-alignment losses on source/target feature batches, and two
//! measurement-only discrepancy statistics.
//!
//! The training losses (`mmd_linear`, `coral`, `homm`, `mmda`) are provided
//! both as direct evaluations and as tape compositions in [`graph`].
//! `mmd_rbf` and `sliced_wd` are for reporting and have no gradient path.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{SeededRng, Tensor};

pub const MMD_SQRT_FLOOR: f64 = 1e-12;
pub const DEFAULT_HOMM_ORDER: u32 = 3;
pub const DEFAULT_SLICED_PROJECTIONS: usize = 50;

/// `[N,F]` features of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch(Tensor);

impl FeatureBatch {
    pub fn new(features: Tensor) -> Result<Self> {
        features.expect_rank(2, "feature batch")?;
        if !features.all_finite() {
            return Err(Error::Domain("feature batch has non-finite entries".into()));
        }
        Ok(FeatureBatch(features))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for r in self.0.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.n() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased sample covariance, row-major `[F,F]`.
    fn covariance(&self) -> Result<Vec<f64>> {
        let n = self.n();
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let d = self.dim();
        let mu = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.0.rows() {
            for i in 0..d {
                let di = r[i] - mu[i];
                for j in 0..d {
                    c[i * d + j] += di * (r[j] - mu[j]);
                }
            }
        }
        let inv = 1.0 / (n - 1) as f64;
        c.iter_mut().for_each(|v| *v *= inv);
        Ok(c)
    }
}

/// Statistical alignment applied during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMethod {
    NoAdapt,
    Ddc,
    Coral,
    Homm,
    Mmda,
}

impl AlignMethod {
    /// Default weight of the domain term for this method.
    pub fn default_weight(self) -> f64 {
        match self {
            AlignMethod::NoAdapt => 0.0,
            AlignMethod::Ddc | AlignMethod::Coral => 1.0,
            AlignMethod::Homm => 0.1,
            AlignMethod::Mmda => 0.5,
        }
    }
}

impl std::str::FromStr for AlignMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noadapt" => Ok(AlignMethod::NoAdapt),
            "ddc" => Ok(AlignMethod::Ddc),
            "coral" => Ok(AlignMethod::Coral),
            "homm" => Ok(AlignMethod::Homm),
            "mmda" => Ok(AlignMethod::Mmda),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for AlignMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignMethod::NoAdapt => "noadapt",
            AlignMethod::Ddc => "ddc",
            AlignMethod::Coral => "coral",
            AlignMethod::Homm => "homm",
            AlignMethod::Mmda => "mmda",
        })
    }
}

fn same_dim(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<usize> {
    if src.dim() != tgt.dim() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            src.dim(),
            tgt.dim()
        )));
    }
    Ok(src.dim())
}

/// `‖mean(src) - mean(tgt)‖`, computed as `sqrt(d² + ε) - sqrt(ε)` so the
/// value is exactly 0 on equal means and the gradient exists there.
pub fn mmd_linear(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<f64> {
    same_dim(src, tgt)?;
    let d2: f64 = src
        .mean()
        .iter()
        .zip(tgt.mean())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((d2 + MMD_SQRT_FLOOR).sqrt() - MMD_SQRT_FLOOR.sqrt())
}

/// `‖C_S - C_T‖_F² / (4 d²)` with unbiased covariances.
pub fn coral(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<f64> {
    let d = same_dim(src, tgt)?;
    let cs = src.covariance()?;
    let ct = tgt.covariance()?;
    let fro: f64 = cs.iter().zip(&ct).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(fro / (4.0 * (d * d) as f64))
}

pub(crate) fn homm_guard(dim: usize, order: u32) -> Result<()> {
    if order == 0 {
        return Err(Error::Config("HoMM order must be >= 1".into()));
    }
    if order >= 4 && dim > 16 {
        return Err(Error::ResourceGuard(format!(
            "HoMM order {order} on {dim} features needs a {dim}^{order} tensor"
        )));
    }
    Ok(())
}

fn outer_moment(batch: &FeatureBatch, order: u32) -> Vec<f64> {
    let l = batch.dim();
    let mut acc = vec![0.0; l.pow(order)];
    for row in batch.0.rows() {
        for (flat, a) in acc.iter_mut().enumerate() {
            let mut rem = flat;
            let mut prod = 1.0;
            for _ in 0..order {
                prod *= row[rem % l];
                rem /= l;
            }
            *a += prod;
        }
    }
    let inv = 1.0 / batch.n() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Order-`p` moment matching: `‖E_s[x^{⊗p}] - E_t[x^{⊗p}]‖_F² / L^p`.
pub fn homm(src: &FeatureBatch, tgt: &FeatureBatch, order: u32) -> Result<f64> {
    let l = same_dim(src, tgt)?;
    homm_guard(l, order)?;
    let ms = outer_moment(src, order);
    let mt = outer_moment(tgt, order);
    let fro: f64 = ms.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(fro / (l as f64).powi(order as i32))
}

/// `mmd_linear + coral`.
pub fn mmda(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<f64> {
    Ok(mmd_linear(src, tgt)? + coral(src, tgt)?)
}

/// The training loss of `method` evaluated directly.
pub fn alignment_loss(method: AlignMethod, src: &FeatureBatch, tgt: &FeatureBatch) -> Result<f64> {
    match method {
        AlignMethod::NoAdapt => Ok(0.0),
        AlignMethod::Ddc => mmd_linear(src, tgt),
        AlignMethod::Coral => coral(src, tgt),
        AlignMethod::Homm => homm(src, tgt, DEFAULT_HOMM_ORDER),
        AlignMethod::Mmda => mmda(src, tgt),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise distance over the pooled samples times {0.5, 1, 2}.
/// Falls back to unit scale when every sample coincides.
pub fn median_bandwidths(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<Vec<f64>> {
    same_dim(src, tgt)?;
    let pooled: Vec<&[f64]> = src.0.rows().chain(tgt.0.rows()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = match dists.len() {
        0 => 0.0,
        n if n % 2 == 1 => dists[n / 2],
        n => 0.5 * (dists[n / 2 - 1] + dists[n / 2]),
    };
    let base = if median > 0.0 { median } else { 1.0 };
    Ok(vec![0.5 * base, base, 2.0 * base])
}

/// Biased (V-statistic) squared MMD with Gaussian kernels, summed over the
/// bandwidth list.
pub fn mmd_rbf(src: &FeatureBatch, tgt: &FeatureBatch, bandwidths: &[f64]) -> Result<f64> {
    same_dim(src, tgt)?;
    if bandwidths.is_empty() {
        return Err(Error::Config("mmd_rbf needs at least one bandwidth".into()));
    }
    if bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
        return Err(Error::Config("bandwidths must be positive".into()));
    }
    let mean_kernel = |a: &Tensor, b: &Tensor, bw: f64| {
        let scale = -0.5 / (bw * bw);
        let mut acc = 0.0;
        for x in a.rows() {
            for y in b.rows() {
                acc += (scale * sq_dist(x, y)).exp();
            }
        }
        acc / (a.shape()[0] * b.shape()[0]) as f64
    };
    let mut total = 0.0;
    for &bw in bandwidths {
        let v = mean_kernel(&src.0, &src.0, bw) + mean_kernel(&tgt.0, &tgt.0, bw)
            - 2.0 * mean_kernel(&src.0, &tgt.0, bw);
        total += v.max(0.0);
    }
    Ok(total)
}

/// `W₁` between two 1-D empirical distributions via their quantile
/// functions, linearly interpolated between order statistics, on
/// `max(n, m)` mid-point quantile levels.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64;
    }
    let levels = sa.len().max(sb.len());
    let quantile = |s: &[f64], q: f64| {
        let pos = (q * s.len() as f64 - 0.5).clamp(0.0, (s.len() - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s.len() - 1);
        let w = pos - lo as f64;
        s[lo] * (1.0 - w) + s[hi] * w
    };
    (0..levels)
        .map(|i| {
            let q = (i as f64 + 0.5) / levels as f64;
            (quantile(&sa, q) - quantile(&sb, q)).abs()
        })
        .sum::<f64>()
        / levels as f64
}

/// Sliced Wasserstein-1: the mean 1-D `W₁` over `n_proj` random unit
/// directions.
pub fn sliced_wd(
    src: &FeatureBatch,
    tgt: &FeatureBatch,
    n_proj: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let d = same_dim(src, tgt)?;
    if n_proj == 0 {
        return Err(Error::Config("sliced_wd needs n_proj >= 1".into()));
    }
    if src.n() == 0 || tgt.n() == 0 {
        return Err(Error::DegenerateBatch("sliced_wd on an empty batch".into()));
    }
    let project = |b: &FeatureBatch, dir: &[f64]| -> Vec<f64> {
        b.0.rows()
            .map(|r| r.iter().zip(dir).map(|(x, w)| x * w).sum())
            .collect()
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        total += wasserstein_1d(&project(src, &dir), &project(tgt, &dir));
    }
    Ok(total / n_proj as f64)
}

/// Alignment losses as tape compositions over `[N,F]` feature variables.
pub mod graph {
    use super::{homm_guard, AlignMethod, DEFAULT_HOMM_ORDER, MMD_SQRT_FLOOR};
    use crate::error::{Error, Result};
    use crate::numkernel::{Tape, Var};

    fn check(tape: &Tape, src: Var, tgt: Var) -> Result<usize> {
        let (s, t) = (tape.shape(src), tape.shape(tgt));
        if s.len() != 2 || t.len() != 2 || s[1] != t[1] {
            return Err(Error::Shape(format!("alignment on {s:?} vs {t:?}")));
        }
        Ok(s[1])
    }

    pub fn mmd_linear(tape: &mut Tape, src: Var, tgt: Var) -> Result<Var> {
        check(tape, src, tgt)?;
        let ms = tape.mean_rows(src)?;
        let mt = tape.mean_rows(tgt)?;
        let d = tape.sub(ms, mt)?;
        let d2 = tape.square(d)?;
        let s = tape.sum_all(d2);
        let s = tape.add_scalar(s, MMD_SQRT_FLOOR);
        let root = tape.sqrt(s)?;
        Ok(tape.add_scalar(root, -MMD_SQRT_FLOOR.sqrt()))
    }

    fn covariance(tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let mu = tape.mean_rows(x)?;
        let mu_wide = tape.broadcast_rows(mu, n)?;
        let centered = tape.sub(x, mu_wide)?;
        let ct = tape.transpose(centered)?;
        let gram = tape.matmul(ct, centered)?;
        Ok(tape.scale(gram, 1.0 / (n - 1) as f64))
    }

    pub fn coral(tape: &mut Tape, src: Var, tgt: Var) -> Result<Var> {
        let d = check(tape, src, tgt)?;
        let cs = covariance(tape, src)?;
        let ct = covariance(tape, tgt)?;
        let diff = tape.sub(cs, ct)?;
        let sq = tape.square(diff)?;
        let s = tape.sum_all(sq);
        Ok(tape.scale(s, 1.0 / (4.0 * (d * d) as f64)))
    }

    pub fn homm(tape: &mut Tape, src: Var, tgt: Var, order: u32) -> Result<Var> {
        let l = check(tape, src, tgt)?;
        homm_guard(l, order)?;
        let ms = tape.outer_moment(src, order)?;
        let mt = tape.outer_moment(tgt, order)?;
        let diff = tape.sub(ms, mt)?;
        let sq = tape.square(diff)?;
        let s = tape.sum_all(sq);
        Ok(tape.scale(s, 1.0 / (l as f64).powi(order as i32)))
    }

    pub fn mmda(tape: &mut Tape, src: Var, tgt: Var) -> Result<Var> {
        let a = mmd_linear(tape, src, tgt)?;
        let b = coral(tape, src, tgt)?;
        tape.add(a, b)
    }

    /// `None` for [`AlignMethod::NoAdapt`].
    pub fn alignment_loss(
        tape: &mut Tape,
        method: AlignMethod,
        src: Var,
        tgt: Var,
    ) -> Result<Option<Var>> {
        Ok(match method {
            AlignMethod::NoAdapt => None,
            AlignMethod::Ddc => Some(mmd_linear(tape, src, tgt)?),
            AlignMethod::Coral => Some(coral(tape, src, tgt)?),
            AlignMethod::Homm => Some(homm(tape, src, tgt, DEFAULT_HOMM_ORDER)?),
            AlignMethod::Mmda => Some(mmda(tape, src, tgt)?),
        })
    }
}
