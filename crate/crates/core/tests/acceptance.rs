// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! A FAIL is reported but only turns into a non-zero exit when
//! `EVUDA_ACCEPTANCE_STRICT=1` is set, so the workspace test run still
//! completes and the verdicts stay visible in its output.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};

use evuda::alignment::{self, AlignMethod, FeatureBatch};
use evuda::cli;
use evuda::data::{self, Domain, DomainShift, SynthSpec, TimeSeriesBatch};
use evuda::evidential::{self, AnnealSchedule, DirichletBatch, LabelBatch, LossKind};
use evuda::metrics;
use evuda::model::{self, ModelConfig};
use evuda::multiscale::ScaleVariant;
use evuda::trainer::{self, TrainConfig};
use evuda::verify::{self, Suite};
use evuda::{Error, SeededRng, Tensor};

struct Outcome {
    id: &'static str,
    passed: bool,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, passed: bool, detail: String) {
    println!("{} criterion {id}: {detail}", if passed { "PASS" } else { "FAIL" });
    out.push(Outcome { id, passed });
}

fn dir(rows: &[Vec<f64>]) -> DirichletBatch {
    DirichletBatch::from_alpha(Tensor::from_rows(rows).unwrap()).unwrap()
}

fn labels(l: &[usize], k: usize) -> LabelBatch {
    LabelBatch::new(l.to_vec(), k).unwrap()
}

fn criterion_1(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let ln2 = std::f64::consts::LN_2;
    let y0 = labels(&[0], 2);
    let checks = [
        ("loss_ce", evidential::loss_ce(&dir(&[vec![2.0, 1.0]]), &y0).unwrap().data()[0], 0.5),
        ("loss_ml", evidential::loss_ml(&dir(&[vec![1.0, 1.0]]), &y0).unwrap().data()[0], ln2),
        ("loss_mse", evidential::loss_mse(&dir(&[vec![1.0, 1.0]]), &y0).unwrap().data()[0], 2.0 / 3.0),
        (
            "kl_to_uniform",
            evidential::kl_to_uniform(&Tensor::from_rows(&[vec![2.0, 1.0]]).unwrap()).unwrap().data()[0],
            ln2 - 0.5,
        ),
        ("anneal(0)", evidential::anneal_coeff(AnnealSchedule::at(0)), 0.0),
        ("anneal(5)", evidential::anneal_coeff(AnnealSchedule::at(5)), 0.5),
        ("anneal(20)", evidential::anneal_coeff(AnnealSchedule::at(20)), 1.0),
    ];
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let ok = worst <= 1e-9 && elapsed < Duration::from_secs(1);
    report(
        out,
        "1",
        ok,
        format!("closed-form oracles, worst |error| {worst:.2e} (tol 1e-9), {elapsed:.2?} (limit 1 s)"),
    );
}

fn sample_dirichlet(alpha: &[f64], rng: &mut SeededRng, buf: &mut [f64]) {
    let mut s = 0.0;
    for (b, &a) in buf.iter_mut().zip(alpha) {
        *b = Gamma::new(a, 1.0).unwrap().sample(rng);
        s += *b;
    }
    buf.iter_mut().for_each(|b| *b /= s);
}

/// Mean and standard error of a sample.
struct Running {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Running {
    fn new() -> Self {
        Running { n: 0.0, sum: 0.0, sum_sq: 0.0 }
    }

    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn se(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m).max(0.0) * self.n / (self.n - 1.0) / self.n).sqrt()
    }
}

fn criterion_2(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut rng = SeededRng::seed_from_u64(20_240_601);
    let samples = 1_000_000;
    let mut worst_z: f64 = 0.0;
    let mut misses = 0;
    for _ in 0..20 {
        let k = rng.gen_range(2..=4);
        let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(1.0..8.0)).collect();
        let y = rng.gen_range(0..k);
        let d = dir(&[alpha.clone()]);
        let yb = labels(&[y], k);
        let (mut py, mut logp, mut sq) = (Running::new(), Running::new(), Running::new());
        let mut p = vec![0.0; k];
        for _ in 0..samples {
            sample_dirichlet(&alpha, &mut rng, &mut p);
            py.push(p[y]);
            logp.push(-p[y].ln());
            sq.push(p.iter().enumerate().map(|(j, pj)| (if j == y { 1.0 } else { 0.0 } - pj).powi(2)).sum());
        }
        // ML is -ln E[p_y]; its standard error follows by the delta method
        let cases = [
            (evidential::loss_ml(&d, &yb).unwrap().data()[0], -py.mean().ln(), py.se() / py.mean()),
            (evidential::loss_ce(&d, &yb).unwrap().data()[0], logp.mean(), logp.se()),
            (evidential::loss_mse(&d, &yb).unwrap().data()[0], sq.mean(), sq.se()),
        ];
        for (closed, mc, se) in cases {
            let z = (closed - mc).abs() / se;
            worst_z = worst_z.max(z);
            if z > 3.0 {
                misses += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = misses == 0 && elapsed < Duration::from_secs(120);
    report(
        out,
        "2",
        ok,
        format!(
            "Monte-Carlo integrals, 20 cases x 3 losses x 1e6 samples, worst {worst_z:.2} SE, {misses} beyond 3 SE, {elapsed:.2?} (limit 120 s)"
        ),
    );
}

fn criterion_3(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for s in Suite::ALL {
        let r = verify::run_suite(s, 100, 7).unwrap();
        ok &= r.passed;
        parts.push(format!("{} {:.1e}", s.name(), r.worst_rel_error));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    report(
        out,
        "3",
        ok,
        format!(
            "gradient suites (100 points; tol 1e-4, e2e 1e-3): {}, {elapsed:.2?} (limit 120 s)",
            parts.join(", ")
        ),
    );
}

fn criterion_4(out: &mut Vec<Outcome>) {
    let f1 = metrics::macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
    let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9], vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap();
    let ece = metrics::ece(&probs, &[0, 1, 0, 0], 10).unwrap().ece;
    let rho = metrics::spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();

    let mut rng = SeededRng::seed_from_u64(99);
    let n = 100_000;
    let mut rows = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let gamma = Gamma::new(1.0, 1.0).unwrap();
    for _ in 0..n {
        let w: Vec<f64> = (0..3).map(|_| gamma.sample(&mut rng) + 1e-12).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = 2;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                y = j;
                break;
            }
        }
        rows.push(p);
        truth.push(y);
    }
    let calibrated = metrics::ece(&Tensor::from_rows(&rows).unwrap(), &truth, 10).unwrap().ece;
    let ok = (f1 - 0.7333).abs() <= 1e-4
        && (f1 - 11.0 / 15.0).abs() <= 1e-9
        && (ece - 0.1).abs() <= 1e-9
        && calibrated <= 0.01
        && (rho - 0.5).abs() <= 1e-12;
    report(
        out,
        "4",
        ok,
        format!(
            "macro-F1 {f1:.6} (11/15), ECE {ece:.12} (10 bins), calibrated-generator ECE {calibrated:.4} at N=1e5, spearman {rho}"
        ),
    );
}

/// Desk-scale task shared by criteria 5 and 6.
const CLASSES: usize = 4;
const SEEDS: u64 = 10;

#[derive(Clone, Copy)]
struct Shift {
    name: &'static str,
    amp: f64,
    freq: f64,
    noise: f64,
}

const MILD: Shift = Shift { name: "mild", amp: 0.8, freq: 0.5, noise: 0.4 };
const MODERATE: Shift = Shift { name: "moderate", amp: 0.6, freq: 1.0, noise: 0.6 };
const STRONG: Shift = Shift { name: "strong", amp: 0.5, freq: 1.5, noise: 1.0 };

fn domains(seed: u64, shift: Shift) -> (TimeSeriesBatch, TimeSeriesBatch) {
    let mut spec = SynthSpec::with_default_templates(CLASSES, 2, 128, 50, 1000 + seed);
    spec.shift = DomainShift {
        amp_scale: shift.amp,
        noise: shift.noise,
        freq_offset: shift.freq,
    };
    (
        data::synth_generate(&spec, Domain::Source).unwrap(),
        data::synth_generate(&spec, Domain::Target).unwrap(),
    )
}

struct RunResult {
    target_f1: f64,
    evidential_ece: f64,
    softmax_ece: f64,
    source_u: f64,
    target_u: f64,
    mmd: f64,
}

fn run(seed: u64, shift: Shift, method: AlignMethod, kind: Option<LossKind>, multiscale: bool) -> RunResult {
    let (src, tgt) = domains(seed, shift);
    let mut m = ModelConfig::new(2, 128, CLASSES);
    m.widths = vec![16, 16, 16];
    m.seed = seed;
    if multiscale {
        m.multiscale = Some(ScaleVariant::M);
    }
    let mut tc = TrainConfig::new(method, kind);
    tc.epochs = 20;
    tc.optimizer.lr = 5e-3;
    tc.weights.lambda3 = 1.0;
    tc.seed = seed;
    let (params, _) = trainer::train(&m, &tc, &src, Some(&tgt)).unwrap();
    let ps = model::predict(&params, src.values(), 256).unwrap();
    let pt = model::predict(&params, tgt.values(), 256).unwrap();
    let truth = tgt.labels().unwrap();
    let fs = FeatureBatch::new(ps.mixed.clone()).unwrap();
    let ft = FeatureBatch::new(pt.mixed.clone()).unwrap();
    let bw = alignment::median_bandwidths(&fs, &ft).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    RunResult {
        target_f1: metrics::macro_f1(&pt.labels, truth, CLASSES).unwrap(),
        evidential_ece: metrics::ece(&pt.evidential_probs, truth, 10).unwrap().ece,
        softmax_ece: metrics::ece(&pt.softmax_probs, truth, 10).unwrap().ece,
        source_u: mean(&ps.uncertainty),
        target_u: mean(&pt.uncertainty),
        mmd: alignment::mmd_rbf(&fs, &ft, &bw).unwrap(),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_5_and_6(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let methods = [AlignMethod::NoAdapt, AlignMethod::Ddc];
    // results[method][with_ce][seed]
    let mut results: Vec<[Vec<RunResult>; 2]> = Vec::new();
    for &method in &methods {
        let plain: Vec<RunResult> = (0..SEEDS).map(|s| run(s, MODERATE, method, None, false)).collect();
        let ce: Vec<RunResult> = (0..SEEDS).map(|s| run(s, MODERATE, method, Some(LossKind::Ce), false)).collect();
        results.push([plain, ce]);
    }

    let mut ok_a = true;
    let mut ok_b = true;
    let mut ok_c = true;
    let (mut da, mut db, mut dc) = (Vec::new(), Vec::new(), Vec::new());
    for (mi, method) in methods.iter().enumerate() {
        let [plain, ce] = &results[mi];
        let wins = (0..SEEDS as usize).filter(|&i| ce[i].target_f1 > plain[i].target_f1).count();
        let (mp, mc) = (mean(plain.iter().map(|r| r.target_f1)), mean(ce.iter().map(|r| r.target_f1)));
        ok_a &= wins >= 6 && mc > mp;
        da.push(format!("{method}: {wins}/10 seeds, mean {mp:.3} -> {mc:.3}"));

        let calib = (0..SEEDS as usize).filter(|&i| ce[i].evidential_ece <= plain[i].softmax_ece).count();
        ok_b &= calib >= 6;
        db.push(format!(
            "{method}: {calib}/10 seeds, mean ECE evidential {:.4} vs softmax {:.4}",
            mean(ce.iter().map(|r| r.evidential_ece)),
            mean(plain.iter().map(|r| r.softmax_ece))
        ));

        let higher = ce.iter().filter(|r| r.target_u > r.source_u).count();
        ok_c &= higher >= 8;
        dc.push(format!(
            "{method}: {higher}/10 seeds, mean u source {:.3} target {:.3}",
            mean(ce.iter().map(|r| r.source_u)),
            mean(ce.iter().map(|r| r.target_u))
        ));
    }
    report(out, "5a", ok_a, format!("evidential-CE raises target macro-F1 in >= 6/10 and on the mean: {}", da.join("; ")));
    report(out, "5b", ok_b, format!("evidential ECE <= softmax-baseline ECE in >= 6/10: {}", db.join("; ")));
    report(out, "5c", ok_c, format!("target uncertainty > source uncertainty in >= 8/10: {}", dc.join("; ")));

    // (d) reuses the moderate ddc+CE runs and adds mild and strong shifts
    let ddc_ce = &results[1][1];
    let mut f1s: Vec<f64> = ddc_ce.iter().map(|r| r.target_f1).collect();
    let mut us: Vec<f64> = ddc_ce.iter().map(|r| r.target_u).collect();
    for shift in [MILD, STRONG] {
        for s in 0..SEEDS {
            let r = run(s, shift, AlignMethod::Ddc, Some(LossKind::Ce), false);
            f1s.push(r.target_f1);
            us.push(r.target_u);
        }
    }
    let rho = metrics::spearman(&f1s, &us).unwrap();
    report(
        out,
        "5d",
        rho <= -0.3,
        format!(
            "spearman(target F1, mean target uncertainty) over {} runs ({} / {} / {} shift) = {rho:.3} (need <= -0.3)",
            f1s.len(),
            MILD.name,
            MODERATE.name,
            STRONG.name
        ),
    );
    let elapsed5 = start.elapsed();
    report(
        out,
        "5t",
        elapsed5 <= Duration::from_secs(600),
        format!("criterion 5 runtime {elapsed5:.1?} (limit 600 s)"),
    );

    // 6: max-pool multi-scale vs the same ddc+CE runs without it
    let lower: Vec<(f64, f64)> = (0..SEEDS)
        .map(|s| (run(s, MODERATE, AlignMethod::Ddc, Some(LossKind::Ce), true).mmd, ddc_ce[s as usize].mmd))
        .collect();
    let wins = lower.iter().filter(|(ms, single)| ms < single).count();
    report(
        out,
        "6",
        wins >= 6,
        format!(
            "mixed-feature mmd_rbf lower with multi-scale M in {wins}/10 seeds (need >= 6), mean {:.4} vs {:.4}",
            mean(lower.iter().map(|p| p.0)),
            mean(lower.iter().map(|p| p.1))
        ),
    );
}

fn criterion_7(out: &mut Vec<Outcome>) {
    let mut failures = Vec::new();
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path();
    let p = |s: &str| base.join(s).to_str().unwrap().to_string();

    // identical seeds through the CLI give byte-identical artifacts
    let gen = ["evuda", "gen-data", "--classes", "3", "--channels", "2", "--length", "32", "--n-per-class", "8", "--shift", "amp=0.7,noise=0.3,freq=0.5", "--seed", "11"];
    let mut outputs: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for run_dir in ["a", "b"] {
        let d = p(run_dir);
        let data_dir = p("data");
        let mut g: Vec<&str> = gen.to_vec();
        g.extend(["--out-dir", &data_dir]);
        if cli::run(g) != cli::EXIT_OK {
            failures.push("gen-data failed".to_string());
        }
        let src = format!("{data_dir}/source.evts");
        let tgt = format!("{data_dir}/target.evts");
        let train = [
            "evuda", "train", "--source", &src, "--target", &tgt, "--method", "mmda", "--evidential", "mse", "--multiscale", "R",
            "--levels", "1", "--widths", "6,6", "--kernels", "5,3", "--epochs", "3", "--batch-size", "8", "--seed", "5", "--out-dir", &d,
        ];
        if cli::run(train) != cli::EXIT_OK {
            failures.push("train failed".to_string());
        }
        let model_shared = p("model.evtm");
        std::fs::copy(format!("{d}/model.evtm"), &model_shared).unwrap();
        let eval = ["evuda", "eval", "--model", &model_shared, "--data", &tgt, "--out-dir", &d];
        let disc = ["evuda", "discrepancy", "--model", &model_shared, "--source", &src, "--target", &tgt, "--seed", "3", "--out-dir", &d];
        if cli::run(eval) != cli::EXIT_OK || cli::run(disc) != cli::EXIT_OK {
            failures.push("eval/discrepancy failed".to_string());
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    if outputs[0] != outputs[1] {
        failures.push("artifacts differ between identical runs".to_string());
    }
    let compared = outputs[0].len();

    // round trips
    let src = data::read_evts(&base.join("data/source.evts")).unwrap();
    let bytes = data::evts_bytes(&src).unwrap();
    if data::evts_bytes(&data::evts_from_bytes(&bytes).unwrap()).unwrap() != bytes {
        failures.push("EVTS round trip not bit-exact".to_string());
    }
    let params = model::load(&base.join("model.evtm")).unwrap();
    let mbytes = model::to_bytes(&params).unwrap();
    if mbytes != std::fs::read(base.join("model.evtm")).unwrap() || model::from_bytes(&mbytes).unwrap() != params {
        failures.push("model round trip not bit-exact".to_string());
    }

    // corruption is rejected with format errors
    let mut rejected = 0;
    let corruptions: Vec<Vec<u8>> = {
        let mut v = Vec::new();
        let mut flip = bytes.clone();
        flip[40] ^= 0x10;
        v.push(flip);
        v.push(bytes[..bytes.len() - 3].to_vec());
        let mut magic = bytes.clone();
        magic[0] = b'Z';
        v.push(magic);
        v
    };
    for c in &corruptions {
        if matches!(data::evts_from_bytes(c), Err(Error::Format { .. })) {
            rejected += 1;
        }
    }
    let mcorrupt: Vec<Vec<u8>> = {
        let mut flip = mbytes.clone();
        let i = mbytes.len() / 2;
        flip[i] ^= 0x01;
        let mut version = mbytes.clone();
        version[4] = 7;
        vec![flip, mbytes[..mbytes.len() - 20].to_vec(), version]
    };
    for c in &mcorrupt {
        if matches!(model::from_bytes(c), Err(Error::Format { .. })) {
            rejected += 1;
        }
    }
    if rejected != 6 {
        failures.push(format!("only {rejected}/6 corrupted files rejected"));
    }
    let ok = failures.is_empty();
    let detail = if ok {
        format!("{compared} artifacts byte-identical across seeded reruns; EVTS and model round trips bit-exact; 6/6 corrupted files rejected")
    } else {
        failures.join("; ")
    };
    report(out, "7", ok, detail);
}

fn main() {
    let start = Instant::now();
    let mut out = Vec::new();
    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_3(&mut out);
    criterion_4(&mut out);
    criterion_7(&mut out);
    criteria_5_and_6(&mut out);
    let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} passed in {:.1?}{}",
        out.len() - failed.len(),
        out.len(),
        start.elapsed(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    let strict = std::env::var("EVUDA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
