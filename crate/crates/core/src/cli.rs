// SPDX-License-Identifier: Apache-2.0

//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps failures onto exit codes: 0 success, 1 check
//! failure, 2 usage or configuration error, 3 numerical abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use serde::Serialize;

use crate::alignment::{self, AlignMethod, FeatureBatch, DEFAULT_SLICED_PROJECTIONS};
use crate::data::{self, ClassTemplate, Domain, DomainShift, SynthSpec, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::evidential::LossKind;
use crate::metrics::{self, Calibration, MetricsReport};
use crate::model::{self, ModelConfig, ModelParams};
use crate::multiscale::{AuxWeights, ScaleVariant};
use crate::numkernel::SeededRng;
use crate::trainer::{self, TrainConfig};
use crate::verify::{self, Suite};
use crate::VERSION;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EVUDA_OUT_DIR";
pub const MEASUREMENT_LAYER: &str = "mixed (concatenated multi-scale) features, eval mode";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "evuda", version, about = "Uncertainty-aware domain adaptation for time series")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic source/target EVTS files
    GenData(GenDataArgs),
    /// Train a model
    Train(TrainArgs),
    /// Evaluate a model on labelled data
    Eval(EvalArgs),
    /// Measure source/target feature discrepancy
    Discrepancy(DiscrepancyArgs),
    /// Run finite-difference gradient checks
    Gradcheck(GradcheckArgs),
    /// Pick the evidential weight by target-validation macro-F1
    SelectLambda3(SelectArgs),
}

// The output location is left out of run echoes since it does not affect
// results.
#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Output directory (default: $EVUDA_OUT_DIR or the current directory)
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    /// Key=value file of defaults; command-line flags take precedence
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl OutArgs {
    fn dir(&self) -> Result<PathBuf> {
        let dir = match &self.out_dir {
            Some(d) => d.clone(),
            None => std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long, default_value_t = 50)]
    pub n_per_class: usize,
    /// Base noise sigma in both domains
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Target shift, e.g. amp=0.6,noise=0.6,freq=1.0
    #[arg(long, default_value = "amp=1.0,noise=0,freq=0")]
    pub shift: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ModelArgs {
    /// none, L, LM, M, A or R
    #[arg(long, default_value = "none")]
    pub multiscale: String,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value = "64,64,64")]
    pub widths: String,
    #[arg(long, default_value = "8,5,3")]
    pub kernels: String,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// noadapt, ddc, coral, homm or mmda
    #[arg(long, default_value = "noadapt")]
    pub method: String,
    /// none, ml, ce or mse
    #[arg(long, default_value = "none")]
    pub evidential: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Defaults to the method's weight
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 10)]
    pub anneal_horizon: usize,
    /// Comma-separated auxiliary head weights
    #[arg(long)]
    pub aux_weights: Option<String>,
    #[arg(long)]
    pub stop_aux_grad: bool,
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    /// Record per-epoch wall-clock time in the log (breaks byte-identity)
    #[arg(long)]
    pub wall_clock: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Tag for the uncertainty statistics
    #[arg(long, default_value = "eval")]
    pub domain: String,
    #[arg(long, default_value_t = metrics::DEFAULT_ECE_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_UNCERTAINTY_BINS)]
    pub hist_bins: usize,
    /// Also write the mixed features as CSV
    #[arg(long)]
    pub export_features: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DiscrepancyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SLICED_PROJECTIONS)]
    pub n_proj: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// all, alignment, ml, ce, mse, kl, ddc, coral, homm, mmda or e2e
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    /// Labelled target subset used only for scoring
    #[arg(long)]
    pub target_val: PathBuf,
    #[arg(long, default_value = "0.01,0.1,0.5,1.0")]
    pub grid: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: &'a T,
}

fn echo<T: Serialize>(command: &'static str, args: &T) -> serde_json::Value {
    serde_json::to_value(RunConfig {
        tool: "evuda",
        version: VERSION,
        command,
        args,
    })
    .expect("config echo serialises")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry {p:?} in {s:?}")))
        })
        .collect()
}

pub fn parse_shift(s: &str) -> Result<DomainShift> {
    let mut shift = DomainShift::none();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("shift entry {part:?} is not key=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("shift value {v:?} is not a number")))?;
        match k.trim() {
            "amp" => shift.amp_scale = v,
            "noise" => shift.noise = v,
            "freq" => shift.freq_offset = v,
            other => return Err(Error::Config(format!("unknown shift key {other:?}"))),
        }
    }
    Ok(shift)
}

fn parse_variant(s: &str) -> Result<Option<ScaleVariant>> {
    if s.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn parse_kind(s: &str) -> Result<Option<LossKind>> {
    if s.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn model_config(a: &ModelArgs, data: &TimeSeriesBatch, seed: u64) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(data.channels(), data.length(), data.classes());
    cfg.multiscale = parse_variant(&a.multiscale)?;
    cfg.levels = a.levels;
    cfg.widths = parse_list(&a.widths, "width")?;
    cfg.kernels = parse_list(&a.kernels, "kernel size")?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(a: &TrainOpts) -> Result<TrainConfig> {
    let method: AlignMethod = a.method.parse()?;
    let mut tc = TrainConfig::new(method, parse_kind(&a.evidential)?);
    tc.epochs = a.epochs;
    tc.batch_size = a.batch_size;
    tc.optimizer.lr = a.lr;
    tc.optimizer.weight_decay = a.weight_decay;
    tc.weights.lambda1 = a.lambda1;
    if let Some(l2) = a.lambda2 {
        tc.weights.lambda2 = l2;
    }
    tc.weights.lambda3 = a.lambda3;
    tc.anneal_horizon = a.anneal_horizon;
    tc.aux_weights = match &a.aux_weights {
        Some(s) => Some(AuxWeights::new(parse_list(s, "aux weight")?)?),
        None => None,
    };
    tc.stop_aux_grad = a.stop_aux_grad;
    tc.val_fraction = a.val_fraction;
    tc.seed = a.seed;
    tc.validate()?;
    Ok(tc)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json_report(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialises");
    s.push('\n');
    s
}

/// CSV with a leading comment line carrying the run echo.
fn csv_report(echo: &serde_json::Value, header: &str, rows: &[String]) -> String {
    let mut s = format!("# {}\n{header}\n", serde_json::to_string(echo).expect("echo"));
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

struct Loaded {
    source: TimeSeriesBatch,
    target: Option<TimeSeriesBatch>,
}

fn load_training_data(a: &TrainOpts) -> Result<Loaded> {
    let source = data::read_evts(&a.source)?;
    if source.labels().is_none() {
        return Err(Error::Config(format!("source {} has no labels", a.source.display())));
    }
    let target = match &a.target {
        Some(p) => Some(data::read_evts(p)?),
        None => None,
    };
    if target.is_none() && a.method != "noadapt" {
        return Err(Error::Config(format!("--method {} needs --target", a.method)));
    }
    Ok(Loaded { source, target })
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<i32> {
    let dir = a.out.dir()?;
    let mut spec = SynthSpec::with_default_templates(a.classes, a.channels, a.length, a.n_per_class, a.seed);
    spec.noise = a.noise;
    spec.shift = parse_shift(&a.shift)?;
    spec.validate()?;
    for (domain, name) in [(Domain::Source, "source"), (Domain::Target, "target")] {
        let batch = data::synth_generate(&spec, domain)?;
        data::write_evts(&batch, &dir.join(format!("{name}.evts")))?;
        let counts: Vec<String> = batch.class_counts().iter().map(usize::to_string).collect();
        println!("{name}: {} samples, per class [{}]", batch.len(), counts.join(", "));
    }
    let templates: Vec<&ClassTemplate> = spec.templates.iter().collect();
    let report = serde_json::json!({
        "config": echo("gen-data", a),
        "templates": templates,
        "shift": spec.shift,
    });
    write_file(&dir.join("gen_data.json"), json_report(&report).as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let dir = a.out.dir()?;
    let d = load_training_data(&a.train)?;
    let mcfg = model_config(&a.train.model, &d.source, a.train.seed)?;
    let mut tc = train_config(&a.train)?;
    tc.record_wall_clock = a.wall_clock;
    let (params, log) = trainer::train(&mcfg, &tc, &d.source, d.target.as_ref())?;
    model::save(&params, &dir.join("model.evtm"))?;
    let mut text = serde_json::to_string(&echo("train", a)).expect("echo");
    text.push('\n');
    text.push_str(&log.to_jsonl());
    write_file(&dir.join("train_log.jsonl"), text.as_bytes())?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs: total loss {:.6}, source macro-F1 {:.4}",
        log.epochs.len(),
        last.loss.total,
        last.source_val_f1
    );
    Ok(EXIT_OK)
}

fn calibration_rows(c: &Calibration) -> Vec<String> {
    c.bins
        .iter()
        .map(|b| format!("{},{},{},{},{}", b.lower, b.upper, b.count, b.mean_confidence, b.accuracy))
        .collect()
}

fn load_model_for(path: &Path, data: &TimeSeriesBatch) -> Result<ModelParams> {
    let params = model::load(path)?;
    let c = &params.config;
    if data.classes() != c.classes || data.channels() != c.channels || data.length() != c.length {
        return Err(Error::Config(format!(
            "model expects C={} T={} K={}, data has C={} T={} K={}",
            c.channels,
            c.length,
            c.classes,
            data.channels(),
            data.length(),
            data.classes()
        )));
    }
    Ok(params)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let dir = a.out.dir()?;
    let batch = data::read_evts(&a.data)?;
    let truth = batch
        .labels()
        .ok_or_else(|| Error::Config(format!("{} has no labels", a.data.display())))?
        .to_vec();
    let params = load_model_for(&a.model, &batch)?;
    let k = params.config.classes;
    let pred = model::predict(&params, batch.values(), 256)?;
    let report = MetricsReport {
        macro_f1: metrics::macro_f1(&pred.labels, &truth, k)?,
        per_class_f1: metrics::per_class_f1(&pred.labels, &truth, k)?,
        confusion: metrics::confusion_matrix(&pred.labels, &truth, k)?,
        calibration: metrics::ece(&pred.probs, &truth, a.bins)?,
        softmax_calibration: metrics::ece(&pred.softmax_probs, &truth, a.bins)?,
        evidential_calibration: metrics::ece(&pred.evidential_probs, &truth, a.bins)?,
        uncertainty: metrics::uncertainty_stats(&pred.uncertainty, &a.domain, a.hist_bins)?,
        f1_convention: metrics::F1_CONVENTION.to_string(),
    };
    let e = echo("eval", a);
    let full = serde_json::json!({
        "config": e,
        "prediction_head": params.config.head,
        "samples": batch.len(),
        "metrics": report,
    });
    write_file(&dir.join("eval_report.json"), json_report(&full).as_bytes())?;

    let confusion: Vec<String> = report
        .confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cells: Vec<String> = r.iter().map(u64::to_string).collect();
            format!("{i},{}", cells.join(","))
        })
        .collect();
    let header = format!(
        "truth,{}",
        (0..k).map(|j| format!("pred_{j}")).collect::<Vec<_>>().join(",")
    );
    write_file(&dir.join("confusion.csv"), csv_report(&e, &header, &confusion).as_bytes())?;
    let rel_header = "bin_lower,bin_upper,count,mean_confidence,accuracy";
    write_file(
        &dir.join("reliability.csv"),
        csv_report(&e, rel_header, &calibration_rows(&report.calibration)).as_bytes(),
    )?;
    write_file(
        &dir.join("reliability_softmax.csv"),
        csv_report(&e, rel_header, &calibration_rows(&report.softmax_calibration)).as_bytes(),
    )?;
    let nb = report.uncertainty.histogram.len();
    let hist: Vec<String> = report
        .uncertainty
        .histogram
        .iter()
        .enumerate()
        .map(|(i, m)| format!("{},{},{m}", i as f64 / nb as f64, (i + 1) as f64 / nb as f64))
        .collect();
    write_file(
        &dir.join("uncertainty_hist.csv"),
        csv_report(&e, "bin_lower,bin_upper,mass", &hist).as_bytes(),
    )?;
    let per_sample: Vec<String> = (0..batch.len())
        .map(|i| {
            let p = pred.labels[i];
            format!("{i},{},{p},{},{}", truth[i], pred.probs.row(i)[p], pred.uncertainty[i])
        })
        .collect();
    write_file(
        &dir.join("predictions.csv"),
        csv_report(&e, "index,truth,prediction,confidence,uncertainty", &per_sample).as_bytes(),
    )?;
    if a.export_features {
        let rows: Vec<String> = pred
            .mixed
            .rows()
            .enumerate()
            .map(|(i, r)| {
                let v: Vec<String> = r.iter().map(f64::to_string).collect();
                format!("{i},{},{}", truth[i], v.join(","))
            })
            .collect();
        let f = pred.mixed.shape()[1];
        let header = format!(
            "index,truth,{}",
            (0..f).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",")
        );
        write_file(&dir.join("features.csv"), csv_report(&e, &header, &rows).as_bytes())?;
    }
    println!(
        "macro-F1 {:.4}, ECE {:.4} (softmax {:.4}), mean uncertainty {:.4}",
        report.macro_f1,
        report.calibration.ece,
        report.softmax_calibration.ece,
        report.uncertainty.mean
    );
    Ok(EXIT_OK)
}

/// Discrepancy statistics between the mixed features of two batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub mmd_rbf: f64,
    pub bandwidths: Vec<f64>,
    pub sliced_wd: f64,
    pub n_proj: usize,
    pub layer: &'static str,
}

pub fn measure_discrepancy(
    params: &ModelParams,
    source: &TimeSeriesBatch,
    target: &TimeSeriesBatch,
    n_proj: usize,
    seed: u64,
) -> Result<Discrepancy> {
    let fs = FeatureBatch::new(model::predict(params, source.values(), 256)?.mixed)?;
    let ft = FeatureBatch::new(model::predict(params, target.values(), 256)?.mixed)?;
    let bandwidths = alignment::median_bandwidths(&fs, &ft)?;
    let mut rng = SeededRng::seed_from_u64(seed);
    Ok(Discrepancy {
        mmd_rbf: alignment::mmd_rbf(&fs, &ft, &bandwidths)?,
        sliced_wd: alignment::sliced_wd(&fs, &ft, n_proj, &mut rng)?,
        bandwidths,
        n_proj,
        layer: MEASUREMENT_LAYER,
    })
}

fn cmd_discrepancy(a: &DiscrepancyArgs) -> Result<i32> {
    let dir = a.out.dir()?;
    let source = data::read_evts(&a.source)?;
    let target = data::read_evts(&a.target)?;
    let params = load_model_for(&a.model, &source)?;
    load_model_for(&a.model, &target)?;
    let d = measure_discrepancy(&params, &source, &target, a.n_proj, a.seed)?;
    let report = serde_json::json!({ "config": echo("discrepancy", a), "discrepancy": d });
    write_file(&dir.join("discrepancy_report.json"), json_report(&report).as_bytes())?;
    println!("mmd_rbf {:.6e}, sliced_wd {:.6e} ({})", d.mmd_rbf, d.sliced_wd, d.layer);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let suites = Suite::parse_selection(&a.suite)?;
    let mut results = Vec::new();
    for s in suites {
        let r = verify::run_suite(s, a.points, a.seed)?;
        println!(
            "{:<6} points {:>4}  worst rel err {:.3e}  tol {:.0e}  {}",
            s.name(),
            r.points,
            r.worst_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        results.push(r);
    }
    let ok = results.iter().all(|r| r.passed);
    if a.out.out_dir.is_some() || std::env::var_os(OUT_DIR_ENV).is_some() {
        let dir = a.out.dir()?;
        let report = serde_json::json!({ "config": echo("gradcheck", a), "suites": results, "passed": ok });
        write_file(&dir.join("gradcheck_report.json"), json_report(&report).as_bytes())?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_select(a: &SelectArgs) -> Result<i32> {
    let dir = a.out.dir()?;
    let d = load_training_data(&a.train)?;
    let target = d
        .target
        .ok_or_else(|| Error::Config("select-lambda3 needs --target".into()))?;
    let target_val = data::read_evts(&a.target_val)?;
    let grid: Vec<f64> = parse_list(&a.grid, "grid")?;
    let mcfg = model_config(&a.train.model, &d.source, a.train.seed)?;
    let tc = train_config(&a.train)?;
    let sel = trainer::select_lambda3(&grid, &mcfg, &tc, &d.source, &target, &target_val)?;
    let e = echo("select-lambda3", a);
    let rows: Vec<String> = sel
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{}",
                r.lambda3,
                r.target_val_f1.map(|v| v.to_string()).unwrap_or_default(),
                r.failure.as_deref().map(|f| f.replace(',', ";")).unwrap_or_default()
            )
        })
        .collect();
    write_file(
        &dir.join("lambda3_table.csv"),
        csv_report(&e, "lambda3,target_val_macro_f1,failure", &rows).as_bytes(),
    )?;
    let report = serde_json::json!({ "config": e, "selection": sel });
    write_file(&dir.join("lambda3_report.json"), json_report(&report).as_bytes())?;
    println!("best lambda3 = {}", sel.best);
    Ok(EXIT_OK)
}

/// Reads a flat `key = value` file into flag arguments. `#` starts a
/// comment; `true`/`false` toggle switches.
pub fn config_file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = k.trim().replace('_', "-");
        if key == "config" {
            return Err(Error::Parse {
                line: i + 1,
                message: "config files cannot include other config files".into(),
            });
        }
        if seen.insert(key.clone(), i + 1).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key {key:?}"),
            });
        }
        match v.trim() {
            "true" => out.push(OsString::from(format!("--{key}"))),
            "false" => {}
            value => {
                out.push(OsString::from(format!("--{key}")));
                out.push(OsString::from(value));
            }
        }
    }
    Ok(out)
}

/// Splices config-file flags in right after the subcommand so that flags
/// given on the command line override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 0;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
            break;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            break;
        }
        i += 1;
    }
    let Some(path) = path else { return Ok(args) };
    if args.len() < 2 {
        return Ok(args);
    }
    let extra = config_file_args(&path)?;
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Discrepancy(a) => cmd_discrepancy(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SelectLambda3(a) => cmd_select(a),
    }
}

/// Full entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = String::new();
            let _ = write!(msg, "error: {e}");
            eprintln!("{msg}");
            exit_code(&e)
        }
    }
}
