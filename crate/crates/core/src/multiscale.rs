// SPDX-License-Identifier: Apache-2.0

//! Multi-scale mixing.
//!
//! The input series `x_0` is reduced by a factor of two per level to give
//! `x_1 … x_M`; level `m` has `⌊P / 2^m⌋` time steps. Each scale is encoded
//! separately and the per-scale features are concatenated. Auxiliary heads
//! on the per-scale features add weighted cross-entropy terms to the
//! classification loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::LabelBatch;
use crate::numkernel::{PoolKind, SeededRng, Tape, Tensor, Var};

/// Down-sampling operator used between levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleVariant {
    /// Stride-2 learnable convolution at every level.
    L,
    /// Max pooling and learnable convolution, alternating (max first).
    LM,
    /// Window-2 max pooling.
    M,
    /// Window-2 average pooling.
    A,
    /// Window-2 random selection; max pooling in evaluation mode.
    R,
}

impl ScaleVariant {
    pub fn is_trainable(self) -> bool {
        matches!(self, ScaleVariant::L | ScaleVariant::LM)
    }

    /// Whether the reduction producing level `level` (1-based) is a convolution.
    pub fn conv_at(self, level: usize) -> bool {
        match self {
            ScaleVariant::L => true,
            ScaleVariant::LM => level.is_multiple_of(2),
            _ => false,
        }
    }

    /// Number of down-sampling kernels needed for `levels` reductions.
    pub fn kernel_count(self, levels: usize) -> usize {
        (1..=levels).filter(|&l| self.conv_at(l)).count()
    }

    fn pool_kind(self, train: bool) -> PoolKind {
        match self {
            ScaleVariant::A => PoolKind::Avg,
            ScaleVariant::R if train => PoolKind::Random,
            _ => PoolKind::Max,
        }
    }
}

impl std::str::FromStr for ScaleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(ScaleVariant::L),
            "LM" => Ok(ScaleVariant::LM),
            "M" => Ok(ScaleVariant::M),
            "A" => Ok(ScaleVariant::A),
            "R" => Ok(ScaleVariant::R),
            other => Err(Error::Config(format!("unknown multiscale variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScaleVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleVariant::L => "L",
            ScaleVariant::LM => "LM",
            ScaleVariant::M => "M",
            ScaleVariant::A => "A",
            ScaleVariant::R => "R",
        })
    }
}

/// Per-scale auxiliary loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights(pub Vec<f64>);

impl AuxWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("aux weights must be finite and >= 0".into()));
        }
        Ok(AuxWeights(weights))
    }

    /// `{0.5, 0.25, 0.25}` for three scales. Other counts put 0.5 on the
    /// finest scale and split 0.5 evenly over the rest.
    pub fn default_for(scales: usize) -> Self {
        match scales {
            0 => AuxWeights(Vec::new()),
            1 => AuxWeights(vec![0.5]),
            n => {
                let rest = 0.5 / (n - 1) as f64;
                let mut w = vec![rest; n];
                w[0] = 0.5;
                AuxWeights(w)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The series at every level, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleSet {
    pub scales: Vec<Tensor>,
}

/// Down-sampled length after `levels` halvings.
pub fn scale_len(len: usize, level: usize) -> usize {
    len >> level
}

/// Builds `levels + 1` scales of `x [N,C,P]` on the tape. `kernels` holds one
/// `[C,C,3]` kernel per convolutional reduction (see
/// [`ScaleVariant::kernel_count`]). `train` selects random selection over max
/// pooling for variant R.
pub fn build_scales_on(
    tape: &mut Tape,
    x: Var,
    levels: usize,
    variant: ScaleVariant,
    kernels: &[Var],
    train: bool,
    mut rng: Option<&mut SeededRng>,
) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("build_scales: expected [N,C,P], got {shape:?}")));
    }
    let len = shape[2];
    if levels >= usize::BITS as usize || len < (1usize << levels) {
        return Err(Error::Config(format!(
            "length {len} too short for {levels} halvings"
        )));
    }
    let needed = variant.kernel_count(levels);
    if kernels.len() != needed {
        return Err(Error::Config(format!(
            "variant {variant} with {levels} levels needs {needed} kernels, got {}",
            kernels.len()
        )));
    }
    let kind = variant.pool_kind(train);
    if kind == PoolKind::Random && rng.is_none() {
        return Err(Error::Config("random down-sampling requires a seeded rng".into()));
    }
    let mut scales = vec![x];
    let mut next_kernel = kernels.iter();
    for level in 1..=levels {
        let prev = *scales.last().unwrap();
        let target = scale_len(len, level);
        let reduced = if variant.conv_at(level) {
            let k = *next_kernel.next().unwrap();
            let c = tape.conv1d(prev, k, 2, 1)?;
            // stride-2, pad-1, width-3 conv yields ceil(T/2); keep ⌊T/2⌋
            if tape.shape(c)[2] > target {
                tape.narrow_time(c, target)?
            } else {
                c
            }
        } else {
            tape.pool1d(prev, kind, 2, 2, rng.as_deref_mut())?
        };
        scales.push(reduced);
    }
    Ok(scales)
}

/// Value-level [`build_scales_on`] in training semantics (variant R draws
/// from `rng`).
pub fn build_scales(
    x: &Tensor,
    levels: usize,
    variant: ScaleVariant,
    kernels: &[Tensor],
    rng: Option<&mut SeededRng>,
) -> Result<MultiScaleSet> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv: Vec<Var> = kernels.iter().map(|k| tape.constant(k.clone())).collect();
    let vars = build_scales_on(&mut tape, xv, levels, variant, &kv, true, rng)?;
    Ok(MultiScaleSet {
        scales: vars.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

/// Concatenates per-scale `[N,F_m]` features in scale order.
pub fn mix_features(per_scale: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = per_scale.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.concat(&vars)?;
    Ok(tape.value(out).clone())
}

/// `CE(final) + Σ_i w_i CE(aux_i)`, each mean-reduced over the batch.
pub fn aux_classification_loss_on(
    tape: &mut Tape,
    final_logits: Var,
    aux_logits: &[Var],
    one_hot: Var,
    weights: &AuxWeights,
) -> Result<Var> {
    if aux_logits.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} aux heads but {} aux weights",
            aux_logits.len(),
            weights.len()
        )));
    }
    let mut total = tape.softmax_cross_entropy(final_logits, one_hot)?;
    for (&logits, &w) in aux_logits.iter().zip(&weights.0) {
        let ce = tape.softmax_cross_entropy(logits, one_hot)?;
        let weighted = tape.scale(ce, w);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

pub fn aux_classification_loss(
    final_logits: &Tensor,
    aux_logits: &[Tensor],
    y: &LabelBatch,
    weights: &AuxWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(final_logits.clone());
    let aux: Vec<Var> = aux_logits.iter().map(|t| tape.constant(t.clone())).collect();
    if final_logits.shape() != [y.len(), y.k()] {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels over {} classes",
            final_logits.shape(),
            y.len(),
            y.k()
        )));
    }
    let oh = tape.constant(y.one_hot());
    let out = aux_classification_loss_on(&mut tape, f, &aux, oh, weights)?;
    tape.value(out).item()
}
