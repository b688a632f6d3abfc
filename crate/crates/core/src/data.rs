// SPDX-License-Identifier: Apache-2.0

//! Dataset container (EVTS), CSV ingestion, stratified splitting and the
//! synthetic domain-shift generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{SeededRng, Tensor};

pub const EVTS_MAGIC: &[u8; 4] = b"EVTS";
pub const EVTS_VERSION: u32 = 1;

/// Series `[N,C,T]` with optional labels in `[0,K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    values: Tensor,
    labels: Option<Vec<usize>>,
    classes: usize,
}

impl TimeSeriesBatch {
    pub fn new(values: Tensor, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Shape(format!("series must be [N,C,T], got {:?}", values.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != values.shape()[0] {
                return Err(Error::Shape(format!(
                    "{} labels for {} series",
                    l.len(),
                    values.shape()[0]
                )));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= classes) {
                return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(TimeSeriesBatch {
            values,
            labels,
            classes,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn without_labels(&self) -> Self {
        TimeSeriesBatch {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        TimeSeriesBatch::new(self.values.clone(), Some(labels), self.classes)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        TimeSeriesBatch {
            values: self.values.select(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
        }
    }

    /// Samples per class, empty when unlabelled.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in self.labels().unwrap_or(&[]) {
            counts[l] += 1;
        }
        counts
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in 32 bits")))
}

pub fn evts_bytes(batch: &TimeSeriesBatch) -> Result<Vec<u8>> {
    let shape = batch.values.shape();
    let mut buf = Vec::with_capacity(25 + 4 * batch.values.len() + 4 * batch.len() + 4);
    buf.extend_from_slice(EVTS_MAGIC);
    buf.extend_from_slice(&EVTS_VERSION.to_le_bytes());
    for (v, what) in [
        (shape[0], "N"),
        (shape[1], "C"),
        (shape[2], "T"),
        (batch.classes, "K"),
    ] {
        buf.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    buf.push(batch.labels.is_some() as u8);
    for &v in batch.values.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(l) = &batch.labels {
        for &c in l {
            let c = i32::try_from(c).map_err(|_| Error::Domain(format!("label {c} too large")))?;
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn write_evts(batch: &TimeSeriesBatch, path: &Path) -> Result<()> {
    let bytes = evts_bytes(batch)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() - *pos < n {
        return Err(Error::format(*pos as u64, format!("truncated while reading {what}")));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn le_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4, what)?.try_into().unwrap()))
}

pub fn evts_from_bytes(buf: &[u8]) -> Result<TimeSeriesBatch> {
    let mut pos = 0;
    if take(buf, &mut pos, 4, "magic")? != EVTS_MAGIC {
        return Err(Error::format(0, "bad magic, not an EVTS file"));
    }
    let version = le_u32(buf, &mut pos, "version")?;
    if version != EVTS_VERSION {
        return Err(Error::format(4, format!("unsupported EVTS version {version}")));
    }
    let n = le_u32(buf, &mut pos, "N")? as usize;
    let c = le_u32(buf, &mut pos, "C")? as usize;
    let t = le_u32(buf, &mut pos, "T")? as usize;
    let k = le_u32(buf, &mut pos, "K")? as usize;
    let flag_at = pos;
    let flag = take(buf, &mut pos, 1, "label flag")?[0];
    if flag > 1 {
        return Err(Error::format(flag_at as u64, format!("label flag must be 0 or 1, got {flag}")));
    }
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
    let raw = take(buf, &mut pos, count.saturating_mul(4), "values")?;
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let labels_at = pos;
    let labels = if flag == 1 {
        let raw = take(buf, &mut pos, n.saturating_mul(4), "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect::<Vec<i32>>(),
        )
    } else {
        None
    };
    let crc_at = pos;
    let stored = le_u32(buf, &mut pos, "checksum")?;
    if pos != buf.len() {
        return Err(Error::format(pos as u64, "trailing bytes after checksum"));
    }
    if crc32fast::hash(&buf[..crc_at]) != stored {
        return Err(Error::format(crc_at as u64, "checksum mismatch"));
    }
    let labels = match labels {
        Some(raw) => {
            let mut out = Vec::with_capacity(raw.len());
            for (i, l) in raw.into_iter().enumerate() {
                if l < 0 || l as usize >= k {
                    return Err(Error::format(
                        (labels_at + 4 * i) as u64,
                        format!("label {l} outside [0, {k})"),
                    ));
                }
                out.push(l as usize);
            }
            Some(out)
        }
        None => None,
    };
    TimeSeriesBatch::new(Tensor::new(vec![n, c, t], values)?, labels, k)
}

pub fn read_evts(path: &Path) -> Result<TimeSeriesBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    evts_from_bytes(&bytes)
}

/// Reads rows of `C·T` values plus an optional trailing label column.
/// A first line that does not parse as numbers is taken as a header.
/// Without labels `K` is 0 unless `classes` is given.
pub fn read_csv(path: &Path, c: usize, t: usize, classes: Option<usize>) -> Result<TimeSeriesBatch> {
    let width = c * t;
    if width == 0 {
        return Err(Error::Config("C and T must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                line: 0,
                message: format!("{other:?}"),
            },
        })?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = rec.iter().map(str::trim).collect();
        if fields.len() == 1 && fields[0].is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    line,
                    message: format!("non-numeric field: {e}"),
                })
            }
        };
        let has_label = if row.len() == width {
            false
        } else if row.len() == width + 1 {
            true
        } else {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} or {} fields, got {}", width + 1, row.len()),
            });
        };
        match labelled {
            None => labelled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(Error::Parse {
                    line,
                    message: "label column present on some rows only".into(),
                })
            }
            _ => {}
        }
        if has_label {
            let l = row[width];
            if l < 0.0 || l.fract() != 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("label {l} is not a class index"),
                });
            }
            labels.push(l as usize);
        }
        values.extend_from_slice(&row[..width]);
    }
    let n = values.len() / width;
    let has_labels = labelled.unwrap_or(false);
    let k = match classes {
        Some(k) => k,
        None if has_labels => labels.iter().max().map_or(0, |m| m + 1),
        None => 0,
    };
    TimeSeriesBatch::new(
        Tensor::new(vec![n, c, t], values)?,
        has_labels.then_some(labels),
        k,
    )
}

/// Writes one row per sample, values then label when present.
pub fn write_csv(batch: &TimeSeriesBatch, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let width = batch.channels() * batch.length();
    for (i, row) in batch.values.data().chunks(width.max(1)).enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| (*v as f32).to_string()).collect();
        if let Some(l) = batch.labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded split. With labels every class is shuffled and cut separately at
/// `round(fraction · n_c)`; a single-sample class goes to train.
pub fn split(
    batch: &TimeSeriesBatch,
    train_fraction: f64,
    seed: u64,
) -> Result<(TimeSeriesBatch, TimeSeriesBatch)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match batch.labels() {
        Some(labels) => {
            let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                by.entry(l).or_default().push(i);
            }
            by.into_values().collect()
        }
        None => vec![(0..batch.len()).collect()],
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let cut = if g.len() == 1 {
            if let Some(l) = batch.labels() {
                log::warn!("class {} has a single sample; it goes to the training split", l[g[0]]);
            }
            1
        } else {
            ((train_fraction * g.len() as f64).round() as usize).min(g.len())
        };
        train.extend_from_slice(&g[..cut]);
        test.extend_from_slice(&g[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((batch.select(&train), batch.select(&test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn stream(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    /// Cycles per window of the two components.
    pub freqs: [f64; 2],
    pub amps: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub amp_scale: f64,
    pub noise: f64,
    pub freq_offset: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            amp_scale: 1.0,
            noise: 0.0,
            freq_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub n_per_class: usize,
    pub templates: Vec<ClassTemplate>,
    pub shift: DomainShift,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Evenly spaced class frequencies with alternating amplitude profiles.
    pub fn with_default_templates(
        classes: usize,
        channels: usize,
        length: usize,
        n_per_class: usize,
        seed: u64,
    ) -> Self {
        let templates = (0..classes)
            .map(|c| ClassTemplate {
                freqs: [2.0 + 1.5 * c as f64, 7.0 + 2.5 * c as f64],
                amps: if c % 2 == 0 { [1.0, 0.5] } else { [0.6, 0.9] },
            })
            .collect();
        SynthSpec {
            classes,
            channels,
            length,
            n_per_class,
            templates,
            shift: DomainShift::none(),
            noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.length == 0 || self.n_per_class == 0 {
            return Err(Error::Config("synthetic spec needs K >= 2 and positive C, T, n".into()));
        }
        if self.templates.len() != self.classes {
            return Err(Error::Config(format!(
                "{} class templates for {} classes",
                self.templates.len(),
                self.classes
            )));
        }
        let s = &self.shift;
        if ![s.amp_scale, s.noise, s.freq_offset, self.noise]
            .iter()
            .all(|v| v.is_finite())
            || s.noise < 0.0
            || self.noise < 0.0
        {
            return Err(Error::Config("shift and noise parameters must be finite, noise >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic per `(seed, domain)`. Each sample draws a random phase per
/// component and channel; the target applies the shift to every sample.
pub fn synth_generate(spec: &SynthSpec, domain: Domain) -> Result<TimeSeriesBatch> {
    generate_on_stream(spec, domain, domain.stream())
}

fn generate_on_stream(spec: &SynthSpec, domain: Domain, stream: u64) -> Result<TimeSeriesBatch> {
    spec.validate()?;
    let mut rng = SeededRng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let (amp_scale, freq_offset, extra_noise) = match domain {
        Domain::Source => (1.0, 0.0, 0.0),
        Domain::Target => (spec.shift.amp_scale, spec.shift.freq_offset, spec.shift.noise),
    };
    let sigma = (spec.noise * spec.noise + extra_noise * extra_noise).sqrt();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, t) = (spec.channels, spec.length);
    let n = spec.classes * spec.n_per_class;
    let mut values = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let tpl = &spec.templates[class];
        for _ in 0..spec.n_per_class {
            for ch in 0..c {
                let ch_gain = 1.0 - 0.15 * ch as f64;
                let phases: [f64; 2] = [
                    rand::Rng::gen_range(&mut rng, 0.0..2.0 * PI),
                    rand::Rng::gen_range(&mut rng, 0.0..2.0 * PI),
                ];
                for step in 0..t {
                    let x = step as f64 / t as f64;
                    let mut v = 0.0;
                    for j in 0..2 {
                        let f = tpl.freqs[j] + freq_offset;
                        v += amp_scale * ch_gain * tpl.amps[j] * (2.0 * PI * f * x + phases[j]).sin();
                    }
                    values.push(v + sigma * noise.sample(&mut rng));
                }
            }
            labels.push(class);
        }
    }
    TimeSeriesBatch::new(Tensor::new(vec![n, c, t], values)?, Some(labels), spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{median_bandwidths, mmd_rbf, FeatureBatch};

    fn labelled(n: usize, k: usize) -> TimeSeriesBatch {
        let values = Tensor::new(vec![n, 2, 3], (0..n * 6).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        TimeSeriesBatch::new(values, Some((0..n).map(|i| i % k).collect()), k).unwrap()
    }

    #[test]
    fn evts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = labelled(5, 3);
        let p = dir.path().join("a.evts");
        write_evts(&b, &p).unwrap();
        assert_eq!(read_evts(&p).unwrap(), b);
        let u = b.without_labels();
        write_evts(&u, &p).unwrap();
        let back = read_evts(&p).unwrap();
        assert_eq!(back, u);
        assert!(back.labels().is_none());
    }

    #[test]
    fn evts_rejects_corruption() {
        let bytes = evts_bytes(&labelled(4, 2)).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        let crc_at = bytes.len() as u64 - 4;
        assert!(matches!(evts_from_bytes(&bad), Err(Error::Format { offset, .. }) if offset == crc_at));
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(evts_from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(evts_from_bytes(&version), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(
            evts_from_bytes(&bytes[..30]),
            Err(Error::Format { offset: 25, .. })
        ));
    }

    #[test]
    fn csv_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "a,b,c,d,label\n1,2,3,4,0\n5,6,7,8,1\n").unwrap();
        let b = read_csv(&p, 1, 4, None).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.labels(), Some(&[0, 1][..]));
        assert_eq!(b.values().data()[5], 6.0);
        std::fs::write(&p, "1,2,3,4\n5,6,7,8\n").unwrap();
        let b = read_csv(&p, 1, 4, None).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.labels().is_none());
        std::fs::write(&p, "1,2,3,4\n5,6,7\n").unwrap();
        assert!(matches!(read_csv(&p, 1, 4, None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn csv_evts_csv_preserves_f32() {
        let dir = tempfile::tempdir().unwrap();
        let b = labelled(3, 2);
        let (c1, e, c2) = (dir.path().join("1.csv"), dir.path().join("x.evts"), dir.path().join("2.csv"));
        write_csv(&b, &c1).unwrap();
        let r = read_csv(&c1, 2, 3, Some(2)).unwrap();
        write_evts(&r, &e).unwrap();
        write_csv(&read_evts(&e).unwrap(), &c2).unwrap();
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    }

    #[test]
    fn stratified_split() {
        let b = labelled(100, 2);
        let (tr, te) = split(&b, 0.7, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (70, 30));
        assert_eq!(tr.class_counts(), vec![35, 35]);
        assert_eq!(te.class_counts(), vec![15, 15]);
        assert_eq!(split(&b, 0.7, 5).unwrap(), (tr.clone(), te.clone()));
        let mut rows: Vec<Vec<u64>> = tr
            .values()
            .rows()
            .chain(te.values().rows())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = b.values().rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        let single = TimeSeriesBatch::new(Tensor::zeros(&[3, 1, 2]), Some(vec![0, 0, 1]), 2).unwrap();
        let (tr, _) = split(&single, 0.5, 1).unwrap();
        assert_eq!(tr.class_counts()[1], 1);
        assert!(split(&b, 1.0, 0).is_err());
    }

    #[test]
    fn synth_basic_properties() {
        let mut spec = SynthSpec::with_default_templates(4, 2, 64, 10, 3);
        let s = synth_generate(&spec, Domain::Source).unwrap();
        assert_eq!(s.class_counts(), vec![10; 4]);
        assert_eq!(s, synth_generate(&spec, Domain::Source).unwrap());
        // zero shift: the target generator on the source stream is the source
        let t = synth_generate(&spec, Domain::Target).unwrap();
        assert_ne!(s.values(), t.values());
        assert_eq!(generate_on_stream(&spec, Domain::Target, Domain::Source.stream()).unwrap(), s);
        spec.shift.amp_scale = 1.5;
        assert_ne!(generate_on_stream(&spec, Domain::Target, Domain::Source.stream()).unwrap(), s);
        spec.shift.noise = f64::NAN;
        assert!(matches!(synth_generate(&spec, Domain::Target), Err(Error::Config(_))));
    }

    #[test]
    fn raw_mmd_grows_with_amplitude_shift() {
        let mut means = Vec::new();
        for amp in [1.0, 1.5, 2.0] {
            let mut total = 0.0;
            for seed in 0..10 {
                let mut spec = SynthSpec::with_default_templates(4, 2, 128, 25, seed);
                spec.shift.amp_scale = amp;
                let flat = |b: &TimeSeriesBatch| {
                    FeatureBatch::new(b.values().clone().reshape(vec![b.len(), 256]).unwrap()).unwrap()
                };
                let s = flat(&synth_generate(&spec, Domain::Source).unwrap());
                let t = flat(&synth_generate(&spec, Domain::Target).unwrap());
                let bw = median_bandwidths(&s, &t).unwrap();
                total += mmd_rbf(&s, &t, &bw).unwrap();
            }
            means.push(total / 10.0);
        }
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }
}
