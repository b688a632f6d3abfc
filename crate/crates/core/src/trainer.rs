// SPDX-License-Identifier: Apache-2.0

//! Training loop: paired source/target batches, the three-part objective,
//! Adam updates, per-epoch logs and the λ₃ grid search.
//!
//! The objective is `λ1·L_cls + λ2·L_d + λ3·L_evi / N` where `L_cls` is the
//! multi-scale classification loss on the source batch, `L_d` the alignment
//! loss between the mixed features of both domains and `L_evi` the summed
//! evidential loss on the source batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::alignment::{graph as align_graph, AlignMethod};
use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::evidential::{graph as evi_graph, AnnealSchedule, LabelBatch, LossKind};
use crate::metrics;
use crate::model::{self, ForwardOptions, Mode, ModelConfig, ModelParams, ParamVars, PredictionHead};
use crate::multiscale::{self, AuxWeights};
use crate::numkernel::{SeededRng, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA3_GRID: [f64; 4] = [0.01, 0.1, 0.5, 1.0];
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    /// `λ1 = 1`, `λ2` from the method, `λ3 = 0.1`.
    pub fn for_method(method: AlignMethod) -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: method.default_weight(),
            lambda3: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// `None` switches the evidential loss off.
    pub loss_kind: Option<LossKind>,
    pub method: AlignMethod,
    pub weights: LossWeights,
    pub anneal_horizon: usize,
    /// Defaults to [`AuxWeights::default_for`] the model's scale count.
    pub aux_weights: Option<AuxWeights>,
    pub stop_aux_grad: bool,
    /// Fraction of the source held out for the per-epoch macro-F1; at 0 the
    /// training source itself is scored.
    pub val_fraction: f64,
    pub record_wall_clock: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: AlignMethod, loss_kind: Option<LossKind>) -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            loss_kind,
            method,
            weights: LossWeights::for_method(method),
            anneal_horizon: AnnealSchedule::DEFAULT_HORIZON,
            aux_weights: None,
            stop_aux_grad: false,
            val_fraction: 0.0,
            record_wall_clock: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if self.anneal_horizon == 0 {
            return Err(Error::Config("anneal horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must be in [0,1)".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite())
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
            || !(o.weight_decay >= 0.0)
        {
            return Err(Error::Config("invalid optimizer constants".into()));
        }
        self.weights.validate()
    }

    fn lambda_t(&self, epoch: usize) -> f64 {
        (epoch as f64 / self.anneal_horizon as f64).min(1.0)
    }

    fn evidential_active(&self) -> bool {
        self.loss_kind.is_some() && self.weights.lambda3 != 0.0
    }
}

/// Component values of one step or epoch average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub domain: f64,
    /// Already divided by the batch size.
    pub evidential: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lambda_t: f64,
    pub loss: LossBreakdown,
    pub source_val_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub warnings: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line: a header, then one record per epoch.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            seed: u64,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            warnings: &'a [String],
        }
        let mut out = serde_json::to_string(&Header {
            seed: self.seed,
            model: &self.model,
            train: &self.train,
            warnings: &self.warnings,
        })
        .expect("header serialises");
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

/// Tape handles of the objective for one step.
pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn finite_or(component: &str, v: f64, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: component.into(),
            epoch,
            step,
        })
    }
}

/// Builds the objective on `tape` from forward passes already recorded
/// there. `tgt_mixed` is `None` when no alignment term is computed.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_on(
    tape: &mut Tape,
    fwd_src: &model::ForwardVars,
    tgt_mixed: Option<Var>,
    y_src: &LabelBatch,
    w: &LossWeights,
    schedule: f64,
    kind: Option<LossKind>,
    method: AlignMethod,
    aux: &AuxWeights,
) -> Result<StepLoss> {
    let one_hot = y_src.one_hot();
    let oh = tape.constant(one_hot.clone());
    let cls = multiscale::aux_classification_loss_on(tape, fwd_src.final_logits, &fwd_src.aux_logits, oh, aux)?;
    let mut total = tape.scale(cls, w.lambda1);
    let mut breakdown = LossBreakdown {
        classification: tape.value(cls).item()?,
        ..LossBreakdown::default()
    };
    if let (Some(tgt), true) = (tgt_mixed, w.lambda2 != 0.0) {
        if let Some(d) = align_graph::alignment_loss(tape, method, fwd_src.mixed, tgt)? {
            breakdown.domain = tape.value(d).item()?;
            let wd = tape.scale(d, w.lambda2);
            total = tape.add(total, wd)?;
        }
    }
    if let (Some(kind), true) = (kind, w.lambda3 != 0.0) {
        let alpha = evi_graph::evidence_to_alpha(tape, fwd_src.evidence);
        let summed = evi_graph::total(tape, alpha, &one_hot, schedule, kind)?;
        let per_sample = tape.scale(summed, 1.0 / y_src.len() as f64);
        breakdown.evidential = tape.value(per_sample).item()?;
        let we = tape.scale(per_sample, w.lambda3);
        total = tape.add(total, we)?;
    }
    breakdown.total = tape.value(total).item()?;
    Ok(StepLoss { total, breakdown })
}

/// Value-level objective on two materialised forward outputs.
pub fn combined_loss(
    fwd_src: &model::ForwardOutput,
    fwd_tgt: &model::ForwardOutput,
    y_src: &LabelBatch,
    w: &LossWeights,
    schedule: AnnealSchedule,
    kind: Option<LossKind>,
    method: AlignMethod,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let src = model::ForwardVars {
        per_scale: fwd_src.per_scale.iter().map(|t| tape.constant(t.clone())).collect(),
        mixed: tape.constant(fwd_src.mixed.clone()),
        aux_logits: fwd_src.aux_logits.iter().map(|t| tape.constant(t.clone())).collect(),
        final_logits: tape.constant(fwd_src.final_logits.clone()),
        evidence: tape.constant(fwd_src.evidence.clone()),
        batch_stats: Vec::new(),
    };
    let tgt = tape.constant(fwd_tgt.mixed.clone());
    let aux = AuxWeights::default_for(src.aux_logits.len());
    let lambda_t = crate::evidential::anneal_coeff(schedule);
    Ok(combined_loss_on(&mut tape, &src, Some(tgt), y_src, w, lambda_t, kind, method, &aux)?.breakdown)
}

struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + c.weight_decay * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Cycles a seeded permutation of `0..n`, reshuffling after each pass.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl IndexStream {
    fn new(n: usize, rng: SeededRng) -> Self {
        let mut s = IndexStream {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn derived_rng(seed: u64, stream: u64) -> SeededRng {
    let mut r = SeededRng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn score(params: &ModelParams, batch: &TimeSeriesBatch) -> Result<f64> {
    let labels = batch.labels().expect("validation batch is labelled");
    let p = model::predict(params, batch.values(), EVAL_CHUNK)?;
    metrics::macro_f1(&p.labels, labels, batch.classes())
}

/// Trains from `model_cfg.seed`-initialised weights. Target labels are never
/// read. `target` may be `None` only when no alignment term is active.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &TimeSeriesBatch,
    target: Option<&TimeSeriesBatch>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let params = model::init(model_cfg)?;
    train_from(params, cfg, source, target)
}

pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    source: &TimeSeriesBatch,
    target: Option<&TimeSeriesBatch>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    // an untrained evidence head cannot supply predictions
    params.config.head = if cfg.evidential_active() {
        PredictionHead::Evidential
    } else {
        PredictionHead::Softmax
    };
    let mcfg = params.config.clone();
    if source.labels().is_none() {
        return Err(Error::Config("source data must carry labels".into()));
    }
    if source.classes() != mcfg.classes {
        return Err(Error::Config(format!(
            "source declares {} classes, model has {}",
            source.classes(),
            mcfg.classes
        )));
    }
    let aux = match &cfg.aux_weights {
        Some(a) => a.clone(),
        None => AuxWeights::default_for(params.aux_heads.len()),
    };
    if aux.len() != params.aux_heads.len() {
        return Err(Error::Config(format!(
            "{} aux weights for {} aux heads",
            aux.len(),
            params.aux_heads.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut weights = cfg.weights;
    if cfg.method == AlignMethod::NoAdapt && weights.lambda2 != 0.0 {
        let msg = format!("method noadapt ignores lambda2 = {}; domain loss forced to 0", weights.lambda2);
        log::warn!("{msg}");
        warnings.push(msg);
        weights.lambda2 = 0.0;
    }
    let align = cfg.method != AlignMethod::NoAdapt && weights.lambda2 != 0.0;
    let target = if align {
        let t = target.ok_or_else(|| Error::Config(format!("method {} needs target data", cfg.method)))?;
        if t.channels() != mcfg.channels || t.length() != mcfg.length {
            return Err(Error::Shape(format!(
                "target series are [{}, {}], model expects [{}, {}]",
                t.channels(),
                t.length(),
                mcfg.channels,
                mcfg.length
            )));
        }
        Some(t.without_labels())
    } else {
        None
    };

    let (train_src, val_src) = if cfg.val_fraction > 0.0 {
        let (tr, va) = crate::data::split(source, 1.0 - cfg.val_fraction, cfg.seed)?;
        (tr, va)
    } else {
        (source.clone(), source.clone())
    };
    let n_src = train_src.len();
    if n_src < 2 {
        return Err(Error::DegenerateBatch(format!("need at least 2 source samples, got {n_src}")));
    }
    let batch = cfg.batch_size.min(n_src);
    let steps = n_src / batch + usize::from(n_src % batch >= 2);
    let mut src_stream = IndexStream::new(n_src, derived_rng(cfg.seed, 1));
    let mut tgt_stream = target.as_ref().map(|t| IndexStream::new(t.len(), derived_rng(cfg.seed, 2)));
    let mut pool_rng = derived_rng(cfg.seed, 3);
    let mut adam = Adam::new(cfg.optimizer, &params);
    let opts = ForwardOptions {
        stop_aux_grad: cfg.stop_aux_grad,
    };
    let train_labels = train_src.labels().expect("labelled").to_vec();

    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lambda_t = cfg.lambda_t(epoch);
        let mut sum = LossBreakdown::default();
        src_stream.reshuffle();
        for step in 0..steps {
            let size = if step + 1 == steps { n_src - step * batch } else { batch }.min(batch);
            let idx = src_stream.take(size);
            let xs = train_src.values().select(&idx);
            let ys = LabelBatch::new(idx.iter().map(|&i| train_labels[i]).collect(), mcfg.classes)?;

            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &params, true);
            let xv = tape.constant(xs);
            let fs = model::forward_on(&mut tape, &params, &vars, xv, Mode::Train, Some(&mut pool_rng), opts)?;
            let mut stats = fs.batch_stats.clone();
            let tgt_mixed = match (&target, tgt_stream.as_mut()) {
                (Some(t), Some(stream)) => {
                    let tidx = stream.take(size);
                    let xt = tape.constant(t.values().select(&tidx));
                    let ft = model::forward_on(&mut tape, &params, &vars, xt, Mode::Train, Some(&mut pool_rng), opts)?;
                    stats.extend(ft.batch_stats);
                    Some(ft.mixed)
                }
                _ => None,
            };
            let kind = if cfg.evidential_active() { cfg.loss_kind } else { None };
            let loss = combined_loss_on(&mut tape, &fs, tgt_mixed, &ys, &weights, lambda_t, kind, cfg.method, &aux)?;
            let b = loss.breakdown;
            finite_or("classification loss", b.classification, epoch, step)?;
            finite_or("domain loss", b.domain, epoch, step)?;
            finite_or("evidential loss", b.evidential, epoch, step)?;
            finite_or("total loss", b.total, epoch, step)?;

            let grads = tape.backward(loss.total)?;
            let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.wrt(v)).collect();
            if !g.iter().all(Tensor::all_finite) {
                return Err(Error::NonFinite {
                    component: "gradient".into(),
                    epoch,
                    step,
                });
            }
            adam.update(&mut params, &g);
            let per_block = params.backbones.iter().map(Vec::len).sum::<usize>();
            for chunk in stats.chunks(per_block) {
                params.apply_batch_stats(chunk)?;
            }
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    component: "parameters".into(),
                    epoch,
                    step,
                });
            }
            sum.classification += b.classification;
            sum.domain += b.domain;
            sum.evidential += b.evidential;
            sum.total += b.total;
        }
        let s = steps as f64;
        let loss = LossBreakdown {
            classification: sum.classification / s,
            domain: sum.domain / s,
            evidential: sum.evidential / s,
            total: sum.total / s,
        };
        let source_val_f1 = score(&params, &val_src)?;
        records.push(EpochRecord {
            epoch,
            steps,
            lambda_t,
            loss,
            source_val_f1,
            wall_clock_ms: cfg
                .record_wall_clock
                .then(|| started.elapsed().as_millis() as u64),
        });
        log::debug!(
            "epoch {epoch}: total {:.5} cls {:.5} dom {:.5} evi {:.5} f1 {:.4}",
            loss.total,
            loss.classification,
            loss.domain,
            loss.evidential,
            source_val_f1
        );
    }
    let log = TrainLog {
        seed: cfg.seed,
        model: mcfg,
        train: cfg.clone(),
        warnings,
        epochs: records,
    };
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambda3Row {
    pub lambda3: f64,
    pub target_val_f1: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambda3Selection {
    pub best: f64,
    pub rows: Vec<Lambda3Row>,
}

/// Runs `evaluate` per grid point and keeps the best score, ties going to
/// the smaller λ₃. A point whose run fails is recorded and skipped.
pub fn select_lambda3_with<F>(grid: &[f64], mut evaluate: F) -> Result<Lambda3Selection>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Config("lambda3 grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &l in grid {
        match evaluate(l) {
            Ok(f1) => {
                let better = match best {
                    None => true,
                    Some((bl, bf)) => f1 > bf || (f1 == bf && l < bl),
                };
                if better {
                    best = Some((l, f1));
                }
                rows.push(Lambda3Row {
                    lambda3: l,
                    target_val_f1: Some(f1),
                    failure: None,
                });
            }
            Err(e) => {
                log::warn!("lambda3 = {l} failed: {e}");
                rows.push(Lambda3Row {
                    lambda3: l,
                    target_val_f1: None,
                    failure: Some(e.to_string()),
                });
            }
        }
    }
    let best = best
        .ok_or_else(|| Error::Contract("every lambda3 grid point failed".into()))?
        .0;
    Ok(Lambda3Selection { best, rows })
}

/// Trains one model per grid point and scores it on labelled target
/// validation data. Training itself never sees target labels.
pub fn select_lambda3(
    grid: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &TimeSeriesBatch,
    target: &TimeSeriesBatch,
    target_val: &TimeSeriesBatch,
) -> Result<Lambda3Selection> {
    if target_val.labels().is_none() {
        return Err(Error::Config("target validation data needs labels".into()));
    }
    select_lambda3_with(grid, |l| {
        let mut c = cfg.clone();
        c.weights.lambda3 = l;
        let (params, _) = train(model_cfg, &c, source, Some(target))?;
        score(&params, target_val)
    })
}
