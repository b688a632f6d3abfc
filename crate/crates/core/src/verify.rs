// SPDX-License-Identifier: Apache-2.0

//! Finite-difference gradient suites run by the `gradcheck` command.
//! Each suite compares tape gradients against central differences of the
//! direct (non-tape) implementation at random points.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::alignment::{self, AlignMethod, FeatureBatch};
use crate::error::{Error, Result};
use crate::evidential::{self, LabelBatch, LossKind};
use crate::model::{self, ForwardOptions, Mode, ModelConfig, ModelParams, ParamVars};
use crate::multiscale::{self, AuxWeights, ScaleVariant};
use crate::numkernel::{compare_with_fd, SeededRng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ml,
    Ce,
    Mse,
    Kl,
    Ddc,
    Coral,
    Homm,
    Mmda,
    E2e,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::Ml,
        Suite::Ce,
        Suite::Mse,
        Suite::Kl,
        Suite::Ddc,
        Suite::Coral,
        Suite::Homm,
        Suite::Mmda,
        Suite::E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ml => "ml",
            Suite::Ce => "ce",
            Suite::Mse => "mse",
            Suite::Kl => "kl",
            Suite::Ddc => "ddc",
            Suite::Coral => "coral",
            Suite::Homm => "homm",
            Suite::Mmda => "mmda",
            Suite::E2e => "e2e",
        }
    }

    pub fn tolerance(self) -> f64 {
        if self == Suite::E2e {
            END_TO_END_TOLERANCE
        } else {
            LOSS_TOLERANCE
        }
    }

    /// Suites selected by a tag; `alignment` expands to the four losses.
    pub fn parse_selection(tag: &str) -> Result<Vec<Suite>> {
        match tag {
            "all" => Ok(Suite::ALL.to_vec()),
            "alignment" => Ok(vec![Suite::Ddc, Suite::Coral, Suite::Homm, Suite::Mmda]),
            t => Suite::ALL
                .iter()
                .copied()
                .find(|s| s.name() == t)
                .map(|s| vec![s])
                .ok_or_else(|| Error::Config(format!("unknown gradient suite {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub points: usize,
    pub worst_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn evidential_point(rng: &mut SeededRng) -> (Tensor, LabelBatch) {
    let k = rng.gen_range(2..=4);
    let n = rng.gen_range(1..=3);
    let ev = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(0.1..5.0)).collect())
        .expect("shape");
    let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (ev, LabelBatch::new(labels, k).expect("labels in range"))
}

fn risk_error(kind: LossKind, rng: &mut SeededRng) -> Result<f64> {
    let (ev, y) = evidential_point(rng);
    let alpha = ev.map(|e| e + 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(alpha.clone());
    let oh = tape.constant(y.one_hot());
    let r = evidential::graph::risk(&mut tape, a, oh, kind)?;
    let s = tape.sum_all(r);
    let g = tape.backward(s)?.wrt(a);
    compare_with_fd(
        &g,
        |p| Ok(evidential::risk(&evidential::DirichletBatch::from_alpha(p.clone())?, &y, kind)?.sum()),
        &alpha,
        FD_STEP,
    )
}

fn kl_error(rng: &mut SeededRng) -> Result<f64> {
    let (ev, _) = evidential_point(rng);
    let at = ev.map(|e| e + 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(at.clone());
    let kl = evidential::graph::kl_to_uniform(&mut tape, a)?;
    let s = tape.sum_all(kl);
    let g = tape.backward(s)?.wrt(a);
    compare_with_fd(&g, |p| Ok(evidential::kl_to_uniform(p)?.sum()), &at, FD_STEP)
}

fn alignment_error(method: AlignMethod, rng: &mut SeededRng) -> Result<f64> {
    let n = rng.gen_range(4..=8);
    let f = rng.gen_range(2..=4);
    let mut draw = |shift: f64| {
        Tensor::new(vec![n, f], (0..n * f).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
            .expect("shape")
    };
    let src = draw(0.0);
    let tgt = draw(0.5);
    let mut worst: f64 = 0.0;
    for wrt_src in [true, false] {
        let mut tape = Tape::new();
        let s = tape.leaf(src.clone());
        let t = tape.leaf(tgt.clone());
        let out = alignment::graph::alignment_loss(&mut tape, method, s, t)?
            .ok_or_else(|| Error::Config("no alignment loss for noadapt".into()))?;
        let grads = tape.backward(out)?;
        let (point, g) = if wrt_src {
            (&src, grads.wrt(s))
        } else {
            (&tgt, grads.wrt(t))
        };
        let err = compare_with_fd(
            &g,
            |p| {
                let (a, b) = if wrt_src { (p, &tgt) } else { (&src, p) };
                alignment::alignment_loss(method, &FeatureBatch::new(a.clone())?, &FeatureBatch::new(b.clone())?)
            },
            point,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Tiny multi-scale model under the full objective with a CE evidential
/// term; worst relative error over every parameter tensor.
pub fn end_to_end_error(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(1, 16, 2);
    cfg.multiscale = Some(ScaleVariant::L);
    cfg.levels = 1;
    cfg.widths = vec![4, 4];
    cfg.kernels = vec![3, 3];
    cfg.seed = seed;
    let params = model::init(&cfg)?;
    let x = Tensor::new(vec![3, 1, 16], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let xt = Tensor::new(vec![3, 1, 16], (0..48).map(|_| rng.gen_range(-1.0..1.5)).collect())?;
    let y = LabelBatch::new(vec![0, 1, 1], 2)?;
    let loss = |p: &ModelParams, tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let tv = tape.constant(xt.clone());
        let fs = model::forward_on(tape, p, vars, xv, Mode::Train, None, ForwardOptions::default())?;
        let ft = model::forward_on(tape, p, vars, tv, Mode::Train, None, ForwardOptions::default())?;
        let oh = tape.constant(y.one_hot());
        let cls = multiscale::aux_classification_loss_on(tape, fs.final_logits, &fs.aux_logits, oh, &AuxWeights::default_for(2))?;
        let dom = alignment::graph::coral(tape, fs.mixed, ft.mixed)?;
        let alpha = evidential::graph::evidence_to_alpha(tape, fs.evidence);
        let evi = evidential::graph::total(tape, alpha, &y.one_hot(), 0.5, LossKind::Ce)?;
        let part = tape.add(cls, dom)?;
        tape.add(part, evi)
    };
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &params, true);
    let out = loss(&params, &mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.all().into_iter().enumerate() {
        let point = params.trainable()[i].clone();
        let err = compare_with_fd(
            &grads.wrt(v),
            |probe| {
                let mut p = params.clone();
                *p.trainable_mut()[i] = probe.clone();
                let mut t = Tape::new();
                let vars = ParamVars::bind(&mut t, &p, false);
                let o = loss(&p, &mut t, &vars)?;
                t.value(o).item()
            },
            &point,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs `points` random cases (one for the end-to-end suite).
pub fn run_suite(suite: Suite, points: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(Suite::ALL.iter().position(|&s| s == suite).unwrap_or(0) as u64);
    let mut worst: f64 = 0.0;
    let runs = if suite == Suite::E2e { 1 } else { points };
    for _ in 0..runs {
        let err = match suite {
            Suite::Ml => risk_error(LossKind::Ml, &mut rng)?,
            Suite::Ce => risk_error(LossKind::Ce, &mut rng)?,
            Suite::Mse => risk_error(LossKind::Mse, &mut rng)?,
            Suite::Kl => kl_error(&mut rng)?,
            Suite::Ddc => alignment_error(AlignMethod::Ddc, &mut rng)?,
            Suite::Coral => alignment_error(AlignMethod::Coral, &mut rng)?,
            Suite::Homm => alignment_error(AlignMethod::Homm, &mut rng)?,
            Suite::Mmda => alignment_error(AlignMethod::Mmda, &mut rng)?,
            Suite::E2e => end_to_end_error(seed)?,
        };
        worst = worst.max(err);
    }
    Ok(SuiteResult {
        suite,
        points: runs,
        worst_rel_error: worst,
        tolerance: suite.tolerance(),
        passed: worst <= suite.tolerance(),
    })
}
