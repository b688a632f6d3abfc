// SPDX-License-Identifier: Apache-2.0

//! The network: optional multi-scale down-sampling, one 1D-CNN backbone per
//! scale, feature concatenation, and three kinds of linear head (auxiliary
//! per-scale classifiers, the final softmax classifier and the evidence head).
//!
//! Backbone block: conv (stride 1, padding k/2, no bias) → batch norm → ReLU
//! → max-pool(2). The pool is skipped once a scale is down to a single step.
//! Global average pooling then gives a fixed-width feature per scale.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential;
use crate::multiscale::{self, ScaleVariant};
use crate::numkernel::{BatchStats, BnMode, PoolKind, SeededRng, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.9;
pub const MODEL_MAGIC: &[u8; 4] = b"EVTM";
pub const MODEL_VERSION: u32 = 1;

/// Which head supplies reported predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionHead {
    Evidential,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    /// `None` runs the backbone on the raw series only.
    pub multiscale: Option<ScaleVariant>,
    /// Number of halvings `M` when multi-scale is on.
    pub levels: usize,
    pub widths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub head: PredictionHead,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(channels: usize, length: usize, classes: usize) -> Self {
        ModelConfig {
            channels,
            length,
            classes,
            multiscale: None,
            levels: 2,
            widths: vec![64, 64, 64],
            kernels: vec![8, 5, 3],
            head: PredictionHead::Evidential,
            seed: 0,
        }
    }

    pub fn scale_count(&self) -> usize {
        match self.multiscale {
            Some(_) => self.levels + 1,
            None => 1,
        }
    }

    /// Width of each per-scale feature after global average pooling.
    pub fn feature_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn mixed_width(&self) -> usize {
        self.feature_width() * self.scale_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::Config("channels and length must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need K >= 2 classes, got {}", self.classes)));
        }
        if self.widths.is_empty() || self.widths.len() != self.kernels.len() {
            return Err(Error::Config(format!(
                "{} conv widths but {} kernel sizes",
                self.widths.len(),
                self.kernels.len()
            )));
        }
        if self.widths.iter().chain(&self.kernels).any(|&v| v == 0) {
            return Err(Error::Config("widths and kernel sizes must be positive".into()));
        }
        if self.multiscale.is_some() {
            if self.levels == 0 {
                return Err(Error::Config("multi-scale needs at least one level".into()));
            }
            if self.levels >= usize::BITS as usize || self.length < (1usize << self.levels) {
                return Err(Error::Config(format!(
                    "length {} too short for {} halvings",
                    self.length, self.levels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, k]`
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[C,C,3]` kernels for convolutional down-sampling levels.
    pub downsample: Vec<Tensor>,
    pub backbones: Vec<Vec<ConvBlock>>,
    pub aux_heads: Vec<Dense>,
    pub classifier: Dense,
    pub evidence_head: Dense,
}

fn uniform(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("init shape")
}

fn dense(rng: &mut SeededRng, fan_in: usize, out: usize) -> Dense {
    Dense {
        weight: uniform(rng, &[fan_in, out], fan_in),
        bias: uniform(rng, &[out], fan_in),
    }
}

/// Deterministic initialisation from `cfg.seed`.
pub fn init(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let downsample = match cfg.multiscale {
        Some(v) => (0..v.kernel_count(cfg.levels))
            .map(|_| uniform(&mut rng, &[c, c, 3], c * 3))
            .collect(),
        None => Vec::new(),
    };
    let backbones = (0..cfg.scale_count())
        .map(|_| {
            let mut cin = c;
            cfg.widths
                .iter()
                .zip(&cfg.kernels)
                .map(|(&w, &k)| {
                    let block = ConvBlock {
                        kernel: uniform(&mut rng, &[w, cin, k], cin * k),
                        gamma: Tensor::ones(&[w]),
                        beta: Tensor::zeros(&[w]),
                        running_mean: Tensor::zeros(&[w]),
                        running_var: Tensor::ones(&[w]),
                    };
                    cin = w;
                    block
                })
                .collect()
        })
        .collect();
    let f = cfg.feature_width();
    let aux_heads = if cfg.multiscale.is_some() {
        (0..cfg.scale_count())
            .map(|_| dense(&mut rng, f, cfg.classes))
            .collect()
    } else {
        Vec::new()
    };
    let classifier = dense(&mut rng, cfg.mixed_width(), cfg.classes);
    let evidence_head = dense(&mut rng, cfg.mixed_width(), cfg.classes);
    Ok(ModelParams {
        config: cfg.clone(),
        downsample,
        backbones,
        aux_heads,
        classifier,
        evidence_head,
    })
}

impl ModelParams {
    /// Trainable tensors in a fixed order shared with [`ParamVars::all`].
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.downsample.iter().collect();
        for b in self.backbones.iter().flatten() {
            out.extend([&b.kernel, &b.gamma, &b.beta]);
        }
        for d in self.heads() {
            out.extend([&d.weight, &d.bias]);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.downsample.iter_mut().collect();
        for b in self.backbones.iter_mut().flatten() {
            out.extend([&mut b.kernel, &mut b.gamma, &mut b.beta]);
        }
        for d in self
            .aux_heads
            .iter_mut()
            .chain([&mut self.classifier, &mut self.evidence_head])
        {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out
    }

    fn heads(&self) -> impl Iterator<Item = &Dense> {
        self.aux_heads
            .iter()
            .chain([&self.classifier, &self.evidence_head])
    }

    /// Every stored tensor: trainable ones, then running statistics.
    fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.trainable();
        for b in self.backbones.iter().flatten() {
            out.extend([&b.running_mean, &b.running_var]);
        }
        out
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut stats: Vec<&mut Tensor> = Vec::new();
        let mut trainable: Vec<&mut Tensor> = self.downsample.iter_mut().collect();
        for b in self.backbones.iter_mut().flatten() {
            trainable.extend([&mut b.kernel, &mut b.gamma, &mut b.beta]);
            stats.extend([&mut b.running_mean, &mut b.running_var]);
        }
        for d in self
            .aux_heads
            .iter_mut()
            .chain([&mut self.classifier, &mut self.evidence_head])
        {
            trainable.extend([&mut d.weight, &mut d.bias]);
        }
        trainable.extend(stats);
        trainable
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.all_tensors().iter().all(|t| t.all_finite())
    }

    /// Folds batch statistics into the running averages, one entry per
    /// conv block in backbone order.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let blocks: Vec<&mut ConvBlock> = self.backbones.iter_mut().flatten().collect();
        if blocks.len() != stats.len() {
            return Err(Error::Contract(format!(
                "{} batch-norm layers but {} statistics",
                blocks.len(),
                stats.len()
            )));
        }
        for (b, s) in blocks.into_iter().zip(stats) {
            for (r, m) in b.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in b.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters placed on a tape, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    downsample: Vec<Var>,
    backbones: Vec<Vec<[Var; 3]>>,
    aux_heads: Vec<[Var; 2]>,
    classifier: [Var; 2],
    evidence_head: [Var; 2],
}

impl ParamVars {
    /// Places every trainable tensor on the tape, as tracked leaves when
    /// `track` is set and as constants otherwise.
    pub fn bind(tape: &mut Tape, params: &ModelParams, track: bool) -> Self {
        let mut put = |t: &Tensor| {
            if track {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let downsample = params.downsample.iter().map(&mut put).collect();
        let backbones = params
            .backbones
            .iter()
            .map(|bb| {
                bb.iter()
                    .map(|b| [put(&b.kernel), put(&b.gamma), put(&b.beta)])
                    .collect()
            })
            .collect();
        let mut head = |d: &Dense| [put(&d.weight), put(&d.bias)];
        let aux_heads = params.aux_heads.iter().map(&mut head).collect();
        let classifier = head(&params.classifier);
        let evidence_head = head(&params.evidence_head);
        ParamVars {
            downsample,
            backbones,
            aux_heads,
            classifier,
            evidence_head,
        }
    }

    /// Same order as [`ModelParams::trainable`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.downsample.clone();
        for b in self.backbones.iter().flatten() {
            out.extend(b);
        }
        for h in self
            .aux_heads
            .iter()
            .chain([&self.classifier, &self.evidence_head])
        {
            out.extend(h);
        }
        out
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub per_scale: Vec<Var>,
    pub mixed: Var,
    pub aux_logits: Vec<Var>,
    pub final_logits: Var,
    pub evidence: Var,
    /// Batch statistics per conv block, in training mode only.
    pub batch_stats: Vec<BatchStats>,
}

/// Materialised forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub per_scale: Vec<Tensor>,
    pub mixed: Tensor,
    pub aux_logits: Vec<Tensor>,
    pub final_logits: Tensor,
    pub evidence: Tensor,
}

impl ForwardOutput {
    fn read(tape: &Tape, v: &ForwardVars) -> Self {
        ForwardOutput {
            per_scale: v.per_scale.iter().map(|x| tape.value(*x).clone()).collect(),
            mixed: tape.value(v.mixed).clone(),
            aux_logits: v.aux_logits.iter().map(|x| tape.value(*x).clone()).collect(),
            final_logits: tape.value(v.final_logits).clone(),
            evidence: tape.value(v.evidence).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Cut gradient flow from the auxiliary heads into the backbones.
    pub stop_aux_grad: bool,
}

fn dense_on(tape: &mut Tape, x: Var, head: [Var; 2]) -> Result<Var> {
    let n = tape.shape(x)[0];
    let y = tape.matmul(x, head[0])?;
    let b = tape.broadcast_rows(head[1], n)?;
    tape.add(y, b)
}

/// Forward pass on a tape. `rng` is needed in training mode with variant R.
pub fn forward_on(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    x: Var,
    mode: Mode,
    rng: Option<&mut SeededRng>,
    opts: ForwardOptions,
) -> Result<ForwardVars> {
    let cfg = &params.config;
    let shape = tape.shape(x);
    if shape != [shape.first().copied().unwrap_or(0), cfg.channels, cfg.length] {
        return Err(Error::Shape(format!(
            "model expects [N, {}, {}], got {:?}",
            cfg.channels, cfg.length, shape
        )));
    }
    let train = mode == Mode::Train;
    let scales = match cfg.multiscale {
        Some(variant) => {
            multiscale::build_scales_on(tape, x, cfg.levels, variant, &vars.downsample, train, rng)?
        }
        None => vec![x],
    };
    let mut per_scale = Vec::with_capacity(scales.len());
    let mut batch_stats = Vec::new();
    for (s, (&input, blocks)) in scales.iter().zip(&vars.backbones).enumerate() {
        let mut h = input;
        for (b, &[kernel, gamma, beta]) in blocks.iter().enumerate() {
            let k = tape.shape(kernel)[2];
            let c = tape.conv1d(h, kernel, 1, k / 2)?;
            let stored = &params.backbones[s][b];
            let bn_mode = if train {
                BnMode::Batch
            } else {
                BnMode::Running {
                    mean: stored.running_mean.data(),
                    var: stored.running_var.data(),
                }
            };
            let (normed, stats) = tape.batch_norm(c, gamma, beta, bn_mode)?;
            batch_stats.extend(stats);
            let act = tape.relu(normed);
            h = if tape.shape(act)[2] >= 2 {
                tape.pool1d(act, PoolKind::Max, 2, 2, None)?
            } else {
                act
            };
        }
        per_scale.push(tape.global_avg_pool(h)?);
    }
    let mixed = tape.concat(&per_scale)?;
    let mut aux_logits = Vec::with_capacity(vars.aux_heads.len());
    for (&feat, &head) in per_scale.iter().zip(&vars.aux_heads) {
        let input = if opts.stop_aux_grad {
            tape.detach(feat)
        } else {
            feat
        };
        aux_logits.push(dense_on(tape, input, head)?);
    }
    let final_logits = dense_on(tape, mixed, vars.classifier)?;
    let raw_evidence = dense_on(tape, mixed, vars.evidence_head)?;
    let evidence = tape.softplus(raw_evidence);
    Ok(ForwardVars {
        per_scale,
        mixed,
        aux_logits,
        final_logits,
        evidence,
        batch_stats,
    })
}

/// Value-level forward pass.
pub fn forward(
    params: &ModelParams,
    x: &Tensor,
    mode: Mode,
    rng: Option<&mut SeededRng>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = forward_on(&mut tape, params, &vars, xv, mode, rng, ForwardOptions::default())?;
    Ok(ForwardOutput::read(&tape, &out))
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut data = Vec::with_capacity(logits.len());
    for r in logits.rows() {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![logits.shape()[0], k], data).expect("softmax shape")
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.rows()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Evaluation-mode outputs of both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Probabilities from the configured prediction head.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub evidential_probs: Tensor,
    pub softmax_probs: Tensor,
    /// `K / S` from the evidence head.
    pub uncertainty: Vec<f64>,
    pub mixed: Tensor,
}

/// Eval-mode prediction, processed in chunks of `chunk` samples.
pub fn predict(params: &ModelParams, x: &Tensor, chunk: usize) -> Result<Prediction> {
    let n = x.shape().first().copied().unwrap_or(0);
    let chunk = chunk.max(1);
    let mut ev_rows = Vec::new();
    let mut logit_rows = Vec::new();
    let mut mixed_rows = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let out = forward(params, &x.select(&idx), Mode::Eval, None)?;
        ev_rows.extend_from_slice(out.evidence.data());
        logit_rows.extend_from_slice(out.final_logits.data());
        mixed_rows.extend_from_slice(out.mixed.data());
        start = end;
    }
    let k = params.config.classes;
    let evidence = Tensor::new(vec![n, k], ev_rows)?;
    let d = evidential::evidence_to_alpha(&evidence)?;
    let evidential_probs = evidential::predict_mean(&d);
    let softmax_probs = softmax_rows(&Tensor::new(vec![n, k], logit_rows)?);
    let probs = match params.config.head {
        PredictionHead::Evidential => evidential_probs.clone(),
        PredictionHead::Softmax => softmax_probs.clone(),
    };
    Ok(Prediction {
        labels: argmax_rows(&probs),
        probs,
        evidential_probs,
        softmax_probs,
        uncertainty: d.uncertainty().to_vec(),
        mixed: Tensor::new(vec![n, params.config.mixed_width()], mixed_rows)?,
    })
}

/// Serialises params: magic, version, config, weights, CRC-32.
pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)
        .map_err(|e| Error::Config(format!("config serialisation: {e}")))?;
    let tensors = params.all_tensors();
    let count: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(24 + config.len() + 8 * count);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::format(0, "bad magic, not a model file"));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(4, format!("unsupported model version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let cfg_bytes = r.take(cfg_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::format(cfg_at as u64, format!("bad config: {e}")))?;
    let count_at = r.pos;
    let count = r.u64("weight count")? as usize;
    let mut params =
        init(&config).map_err(|e| Error::format(cfg_at as u64, format!("invalid config: {e}")))?;
    let expected: usize = params.all_tensors().iter().map(|t| t.len()).sum();
    if count != expected {
        return Err(Error::format(
            count_at as u64,
            format!("config implies {expected} weights, file has {count}"),
        ));
    }
    let payload = r.take(count.saturating_mul(8), "weights")?;
    let crc_at = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after checksum"));
    }
    if crc32fast::hash(&buf[..crc_at]) != stored {
        return Err(Error::format(crc_at as u64, "checksum mismatch"));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.all_tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("counted");
        }
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
