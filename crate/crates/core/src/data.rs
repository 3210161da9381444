//! Labeled multivariate series: UEA `.ts` ingestion, seeded splits,
//! normalization, a binary cache and a synthetic spectral task.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{read_f64, read_u32, read_u64};
use crate::reshape::{reshape_forward, DimTag, ReshapeSpec};
use crate::stack::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// `N` examples of shape `[T, w]`, stored contiguously. Ragged inputs are
/// zero-padded to the longest example and `lengths` records the real size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub steps: usize,
    pub width: usize,
    pub series: Vec<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub dim_tag: DimTag,
    /// Empty until [`split_dataset`] assigns one entry per example.
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn example_values(&self, i: usize) -> &[f64] {
        let n = self.steps * self.width;
        &self.series[i * n..(i + 1) * n]
    }

    pub fn example(&self, i: usize) -> Tensor {
        Tensor::from_real(&[self.steps, self.width], self.example_values(i).to_vec())
            .expect("dataset extents are consistent")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Model inputs for one split, reshaped by `spec`.
    pub fn samples(&self, split: Split, spec: &ReshapeSpec) -> Result<Vec<Sample>> {
        if self.split.is_empty() {
            return Err(Error::Data(format!(
                "dataset `{}` has no split assigned",
                self.name
            )));
        }
        self.indices(split)
            .into_iter()
            .map(|i| {
                Ok(Sample {
                    x: reshape_forward(&self.example(i), spec)?,
                    valid_len: spec.valid_steps(self.lengths[i]),
                    label: self.labels[i],
                })
            })
            .collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.series.len() != n * self.steps * self.width || self.lengths.len() != n {
            return Err(Error::Data(format!(
                "dataset `{}` has inconsistent extents",
                self.name
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::Data(format!(
                "label {y} outside {} classes",
                self.classes()
            )));
        }
        Ok(())
    }
}

/// One of the six benchmark corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub short: &'static str,
    pub archive_name: &'static str,
    pub steps: usize,
    pub width: usize,
    pub classes: usize,
    pub dim_tag: DimTag,
}

impl Corpus {
    pub fn url(&self) -> String {
        format!(
            "https://www.timeseriesclassification.com/description.php?Dataset={}",
            self.archive_name
        )
    }
}

pub const CORPORA: [Corpus; 6] = [
    Corpus {
        short: "Ethanol",
        archive_name: "EthanolConcentration",
        steps: 1751,
        width: 2,
        classes: 4,
        dim_tag: DimTag::Low,
    },
    Corpus {
        short: "Worms",
        archive_name: "EigenWorms",
        steps: 17984,
        width: 6,
        classes: 5,
        dim_tag: DimTag::Medium,
    },
    Corpus {
        short: "SCP1",
        archive_name: "SelfRegulationSCP1",
        steps: 896,
        width: 6,
        classes: 2,
        dim_tag: DimTag::Medium,
    },
    Corpus {
        short: "SCP2",
        archive_name: "SelfRegulationSCP2",
        steps: 1152,
        width: 7,
        classes: 2,
        dim_tag: DimTag::Medium,
    },
    Corpus {
        short: "Heartbeat",
        archive_name: "Heartbeat",
        steps: 405,
        width: 61,
        classes: 2,
        dim_tag: DimTag::High,
    },
    Corpus {
        short: "Motor",
        archive_name: "MotorImagery",
        steps: 3000,
        width: 63,
        classes: 2,
        dim_tag: DimTag::High,
    },
];

/// Look up a corpus by short or archive name, ignoring case.
pub fn corpus(name: &str) -> Option<&'static Corpus> {
    CORPORA
        .iter()
        .find(|c| c.short.eq_ignore_ascii_case(name) || c.archive_name.eq_ignore_ascii_case(name))
}

/// Tag for files outside the canonical list, by input width.
pub fn dim_tag_for_width(width: usize) -> DimTag {
    match width {
        0..=3 => DimTag::Low,
        4..=16 => DimTag::Medium,
        _ => DimTag::High,
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: usize, tag: &str, value: Option<&str>) -> Result<bool> {
    match value.map(str::to_ascii_lowercase).as_deref() {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        _ => Err(parse_err(line, format!("@{tag} expects true or false"))),
    }
}

#[derive(Default)]
struct Header {
    name: Option<String>,
    univariate: Option<bool>,
    dimensions: Option<usize>,
    series_length: Option<usize>,
    class_labels: Option<Vec<String>>,
}

/// Parse `.ts` text. Series of unequal length are an error unless
/// `pad_ragged` is set, in which case they are zero-padded.
pub fn parse_ts(text: &str, fallback_name: &str, pad_ragged: bool) -> Result<Dataset> {
    let mut header = Header::default();
    let mut in_data = false;
    let mut rows: Vec<(Vec<Vec<f64>>, usize, usize)> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(rest) = line.strip_prefix('@') else {
                return Err(parse_err(lineno, "expected a header line or @data"));
            };
            let mut parts = rest.split_whitespace();
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            match tag.as_str() {
                "problemname" => {
                    let name = parts.collect::<Vec<_>>().join(" ");
                    if name.is_empty() {
                        return Err(parse_err(lineno, "@problemName needs a value"));
                    }
                    header.name = Some(name);
                }
                "timestamps" | "missing" | "equallength" => {
                    let v = parse_bool(lineno, &tag, parts.next())?;
                    if tag == "timestamps" && v {
                        return Err(parse_err(lineno, "timestamped series are not supported"));
                    }
                }
                "univariate" => header.univariate = Some(parse_bool(lineno, &tag, parts.next())?),
                "dimensions" | "serieslength" => {
                    let v: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .filter(|&v| v > 0)
                        .ok_or_else(|| {
                            parse_err(lineno, format!("@{tag} expects a positive integer"))
                        })?;
                    if tag == "dimensions" {
                        header.dimensions = Some(v);
                    } else {
                        header.series_length = Some(v);
                    }
                }
                "classlabel" => {
                    if !parse_bool(lineno, &tag, parts.next())? {
                        return Err(parse_err(lineno, "unlabeled files are not supported"));
                    }
                    let labels: Vec<String> = parts.map(str::to_string).collect();
                    if labels.len() < 2 {
                        return Err(parse_err(
                            lineno,
                            "@classLabel lists fewer than two classes",
                        ));
                    }
                    for (i, l) in labels.iter().enumerate() {
                        if class_index.insert(l.clone(), i).is_some() {
                            return Err(parse_err(lineno, format!("duplicate class label `{l}`")));
                        }
                    }
                    header.class_labels = Some(labels);
                }
                "data" => {
                    if header.class_labels.is_none() {
                        return Err(parse_err(lineno, "@data before @classLabel"));
                    }
                    in_data = true;
                }
                other => return Err(parse_err(lineno, format!("unknown header tag @{other}"))),
            }
            continue;
        }

        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(parse_err(lineno, "example has no label field"));
        }
        let label_name = fields[fields.len() - 1].trim();
        let label = *class_index.get(label_name).ok_or_else(|| {
            Error::Data(format!("line {lineno}: unknown class label `{label_name}`"))
        })?;
        let dims = &fields[..fields.len() - 1];
        let expected_dims = match (header.univariate, header.dimensions) {
            (Some(true), _) => Some(1),
            (_, d) => d,
        };
        if let Some(d) = expected_dims {
            if dims.len() != d {
                return Err(parse_err(
                    lineno,
                    format!("expected {d} dimensions, found {}", dims.len()),
                ));
            }
        }
        let mut channels = Vec::with_capacity(dims.len());
        for dim in dims {
            let values = dim
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    if v == "?" {
                        return Err(parse_err(lineno, "missing values are not supported"));
                    }
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| parse_err(lineno, format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            channels.push(values);
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(parse_err(
                lineno,
                "dimensions of one example differ in length",
            ));
        }
        if let Some((first, _, _)) = rows.first() {
            if first.len() != channels.len() {
                return Err(parse_err(
                    lineno,
                    "dimension count changes between examples",
                ));
            }
        }
        rows.push((channels, label, lineno));
    }

    if !in_data {
        return Err(parse_err(
            text.lines().count().max(1),
            "missing @data section",
        ));
    }
    if rows.is_empty() {
        return Err(Error::Data("file contains no examples".into()));
    }
    let width = rows[0].0.len();
    let steps = rows.iter().map(|r| r.0[0].len()).max().unwrap_or(0);
    if !pad_ragged {
        if let Some((_, _, lineno)) = rows.iter().find(|r| r.0[0].len() != steps) {
            return Err(parse_err(
                *lineno,
                "series lengths differ; enable ragged padding to load this file",
            ));
        }
    }
    let mut series = vec![0.0; rows.len() * steps * width];
    let mut lengths = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (n, (channels, label, _)) in rows.iter().enumerate() {
        let len = channels[0].len();
        for (f, ch) in channels.iter().enumerate() {
            for (t, &v) in ch.iter().enumerate() {
                series[(n * steps + t) * width + f] = v;
            }
        }
        lengths.push(len);
        labels.push(*label);
    }
    let name = header.name.unwrap_or_else(|| fallback_name.to_string());
    let dim_tag = corpus(&name).map_or_else(|| dim_tag_for_width(width), |c| c.dim_tag);
    let ds = Dataset {
        name,
        steps,
        width,
        series,
        lengths,
        labels,
        class_names: header.class_labels.unwrap_or_default(),
        dim_tag,
        split: Vec::new(),
    };
    ds.check()?;
    Ok(ds)
}

pub fn load_ts(path: &Path, pad_ragged: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    parse_ts(&text, stem, pad_ragged)
}

/// Emit `.ts` text; values use the shortest exact decimal representation.
pub fn write_ts(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let equal = ds.lengths.iter().all(|&l| l == ds.steps);
    writeln!(w, "@problemName {}", ds.name)?;
    writeln!(w, "@timeStamps false")?;
    writeln!(w, "@missing false")?;
    writeln!(w, "@univariate {}", ds.width == 1)?;
    writeln!(w, "@dimensions {}", ds.width)?;
    writeln!(w, "@equalLength {equal}")?;
    if equal {
        writeln!(w, "@seriesLength {}", ds.steps)?;
    }
    writeln!(w, "@classLabel true {}", ds.class_names.join(" "))?;
    writeln!(w, "@data")?;
    for i in 0..ds.len() {
        let x = ds.example_values(i);
        let mut fields = Vec::with_capacity(ds.width + 1);
        for f in 0..ds.width {
            let vals: Vec<String> = (0..ds.lengths[i])
                .map(|t| format!("{:?}", x[t * ds.width + f]))
                .collect();
            fields.push(vals.join(","));
        }
        fields.push(ds.class_names[ds.labels[i]].clone());
        writeln!(w, "{}", fields.join(":"))?;
    }
    Ok(())
}

/// Train/val/test sizes for `n` examples: 70% (floor) to train, the
/// remainder halved with the odd one going to validation.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = (n - train).div_ceil(2);
    (train, val, n - train - val)
}

pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let n = ds.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "cannot split {n} examples; need at least 10"
        )));
    }
    let (train, val, _) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            split[i] = Split::Train;
        } else if rank < train + val {
            split[i] = Split::Val;
        }
    }
    Ok(Dataset {
        split,
        ..ds.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    PerChannelZscore,
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "zscore" | "per_channel_zscore" => Ok(Self::PerChannelZscore),
            other => Err(Error::Config(format!(
                "unknown normalization `{other}` (expected none or zscore)"
            ))),
        }
    }
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel statistics used by [`normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalize with statistics from the training split (all examples if
/// unsplit). Padding beyond each example's length stays zero.
pub fn normalize(ds: &Dataset, mode: NormMode) -> Result<(Dataset, NormStats)> {
    let w = ds.width;
    if mode == NormMode::None {
        let stats = NormStats {
            mean: vec![0.0; w],
            std: vec![1.0; w],
        };
        return Ok((ds.clone(), stats));
    }
    let fit: Vec<usize> = if ds.split.is_empty() {
        (0..ds.len()).collect()
    } else {
        ds.indices(Split::Train)
    };
    if fit.is_empty() {
        return Err(Error::Data(
            "no examples to fit normalization statistics".into(),
        ));
    }
    let mut mean = vec![0.0; w];
    let mut std = vec![0.0; w];
    for f in 0..w {
        let values = || {
            fit.iter().flat_map(move |&i| {
                let x = ds.example_values(i);
                (0..ds.lengths[i]).map(move |t| x[t * w + f])
            })
        };
        let count = values().count() as f64;
        let first = values().next().unwrap_or(0.0);
        // A constant channel keeps its exact value as the mean so it maps to 0.
        mean[f] = if values().all(|v| v == first) {
            first
        } else {
            values().sum::<f64>() / count
        };
        let var = values().map(|v| (v - mean[f]).powi(2)).sum::<f64>() / count;
        std[f] = var.sqrt();
        if std[f] < STD_FLOOR {
            log::warn!(
                "channel {f} of `{}` has near-zero variance; flooring its std at {STD_FLOOR:e}",
                ds.name
            );
            std[f] = STD_FLOOR;
        }
    }
    let stats = NormStats { mean, std };
    Ok((
        map_values(ds, |f, v| (v - stats.mean[f]) / stats.std[f]),
        stats,
    ))
}

pub fn denormalize(ds: &Dataset, stats: &NormStats) -> Dataset {
    map_values(ds, |f, v| v * stats.std[f] + stats.mean[f])
}

fn map_values(ds: &Dataset, op: impl Fn(usize, f64) -> f64) -> Dataset {
    let mut out = ds.clone();
    let per = ds.steps * ds.width;
    for i in 0..ds.len() {
        let x = &mut out.series[i * per..(i + 1) * per];
        for t in 0..ds.lengths[i] {
            for f in 0..ds.width {
                let v = &mut x[t * ds.width + f];
                *v = op(f, *v);
            }
        }
    }
    out
}

/// Noise level of the synthetic task.
pub const SYNTH_NOISE: f64 = 0.1;

/// Balanced sinusoid classification: class `k` draws per-channel
/// frequencies from the band `[2 + 6k, 4 + 6k]` cycles per series,
/// amplitudes in `[0.8, 1.2]` and random phases, plus Gaussian noise.
pub fn synth_sine_task(
    n: usize,
    steps: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_sine_task_with_noise(n, steps, width, classes, seed, SYNTH_NOISE)
}

pub fn synth_band(class: usize) -> (f64, f64) {
    let lo = 2.0 + 6.0 * class as f64;
    (lo, lo + 2.0)
}

pub fn synth_sine_task_with_noise(
    n: usize,
    steps: usize,
    width: usize,
    classes: usize,
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n == 0 || steps == 0 || width == 0 {
        return Err(Error::Config(
            "synthetic task needs positive N, T and d".into(),
        ));
    }
    if synth_band(classes - 1).1 >= steps as f64 / 2.0 {
        return Err(Error::Config(format!(
            "{classes} frequency bands do not fit below Nyquist for T = {steps}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("invalid noise level {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut series = Vec::with_capacity(n * steps * width);
    for &label in &labels {
        let (lo, hi) = synth_band(label);
        let waves: Vec<(f64, f64, f64)> = (0..width)
            .map(|_| {
                (
                    rng.gen_range(lo..hi),
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for t in 0..steps {
            for &(freq, amp, phase) in &waves {
                let clean = amp * (2.0 * PI * freq * t as f64 / steps as f64 + phase).sin();
                series.push(clean + noise * gauss.sample(&mut rng));
            }
        }
    }
    Ok(Dataset {
        name: "synth".into(),
        steps,
        width,
        series,
        lengths: vec![steps; n],
        labels,
        class_names: (0..classes).map(|k| format!("class{k}")).collect(),
        dim_tag: dim_tag_for_width(width),
        split: Vec::new(),
    })
}

const CACHE_MAGIC: &[u8; 8] = b"LSQDATA\0";
const CACHE_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

fn tag_code(tag: DimTag) -> u8 {
    match tag {
        DimTag::Low => 0,
        DimTag::Medium => 1,
        DimTag::High => 2,
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(format!("cache string is not UTF-8: {e}")))
}

/// Binary cache: magic, version, dims, dtype, metadata, then raw values.
/// Split assignments are not cached.
pub fn write_cache(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    for d in [ds.len(), ds.steps, ds.width, ds.classes()] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F64, tag_code(ds.dim_tag)])?;
    write_str(w, &ds.name)?;
    for c in &ds.class_names {
        write_str(w, c)?;
    }
    for (&y, &len) in ds.labels.iter().zip(&ds.lengths) {
        w.write_all(&(y as u64).to_le_bytes())?;
        w.write_all(&(len as u64).to_le_bytes())?;
    }
    for v in &ds.series {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cache(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Data("not a dataset cache (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("unsupported cache version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u64(r)? as usize;
    }
    let [n, steps, width, classes] = dims;
    let mut codes = [0u8; 2];
    r.read_exact(&mut codes)?;
    if codes[0] != DTYPE_F64 {
        return Err(Error::Data(format!("unsupported cache dtype {}", codes[0])));
    }
    let dim_tag = match codes[1] {
        0 => DimTag::Low,
        1 => DimTag::Medium,
        2 => DimTag::High,
        other => return Err(Error::Data(format!("unknown dimensionality tag {other}"))),
    };
    let name = read_str(r)?;
    let class_names = (0..classes)
        .map(|_| read_str(r))
        .collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::with_capacity(n);
    let mut lengths = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u64(r)? as usize);
        lengths.push(read_u64(r)? as usize);
    }
    let series = (0..n * steps * width)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        name,
        steps,
        width,
        series,
        lengths,
        labels,
        class_names,
        dim_tag,
        split: Vec::new(),
    };
    ds.check()?;
    Ok(ds)
}

/// Concatenate two datasets with the same extents and label space.
pub fn pool(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.width != b.width || a.class_names != b.class_names {
        return Err(Error::Data(format!(
            "cannot pool `{}` and `{}`: widths or class lists differ",
            a.name, b.name
        )));
    }
    let steps = a.steps.max(b.steps);
    let mut series = Vec::with_capacity((a.len() + b.len()) * steps * a.width);
    for ds in [a, b] {
        for i in 0..ds.len() {
            series.extend_from_slice(ds.example_values(i));
            series.resize(series.len() + (steps - ds.steps) * ds.width, 0.0);
        }
    }
    Ok(Dataset {
        name: a.name.clone(),
        steps,
        width: a.width,
        series,
        lengths: a.lengths.iter().chain(&b.lengths).copied().collect(),
        labels: a.labels.iter().chain(&b.labels).copied().collect(),
        class_names: a.class_names.clone(),
        dim_tag: a.dim_tag,
        split: Vec::new(),
    })
}

fn candidate_files(dir: &Path, archive: &str) -> Vec<(PathBuf, PathBuf)> {
    let nested = dir.join(archive);
    [nested.as_path(), dir]
        .iter()
        .map(|base| {
            (
                base.join(format!("{archive}_TRAIN.ts")),
                base.join(format!("{archive}_TEST.ts")),
            )
        })
        .collect()
}

/// Load a named corpus from `dir`, pooling the archive's TRAIN and TEST
/// files. A cache file next to them is used when present and written
/// otherwise.
pub fn load_named(dir: &Path, name: &str, pad_ragged: bool) -> Result<Dataset> {
    let info = corpus(name);
    let archive = info.map_or(name, |c| c.archive_name);
    let cache_path = dir.join(format!("{archive}.lsqcache"));
    if cache_path.is_file() {
        let ds = read_cache(&mut BufReader::new(File::open(&cache_path)?))?;
        log::info!("loaded `{archive}` from cache {}", cache_path.display());
        return Ok(ds);
    }
    let single = dir.join(format!("{archive}.ts"));
    let ds = if let Some((train, test)) = candidate_files(dir, archive)
        .into_iter()
        .find(|(a, b)| a.is_file() && b.is_file())
    {
        pool(&load_ts(&train, pad_ragged)?, &load_ts(&test, pad_ragged)?)?
    } else if single.is_file() {
        load_ts(&single, pad_ragged)?
    } else {
        return Err(Error::MissingDataset {
            name: archive.to_string(),
            path: dir.to_path_buf(),
            url: info.map_or_else(
                || "https://www.timeseriesclassification.com".to_string(),
                Corpus::url,
            ),
        });
    };
    let ds = match info {
        Some(c) => Dataset {
            name: c.short.to_string(),
            dim_tag: c.dim_tag,
            ..ds
        },
        None => ds,
    };
    match File::create(&cache_path) {
        Ok(f) => {
            let mut w = BufWriter::new(f);
            if let Err(e) = write_cache(&ds, &mut w).and_then(|_| Ok(w.flush()?)) {
                log::warn!("could not write cache {}: {e}", cache_path.display());
            }
        }
        Err(e) => log::warn!("could not write cache {}: {e}", cache_path.display()),
    }
    Ok(ds)
}
