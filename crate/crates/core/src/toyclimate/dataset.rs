use std::path::Path;

use super::{reference_run, run_nudged, Field, SystemConfig};
use crate::artifact::{self, Header, PayloadReader, Version};
use crate::conditioning::{build_metadata, METADATA_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "NODC1";
pub const DATASET_VERSION: Version = Version::new(1, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    State,
    Tendency,
}

/// How the nudged run is cut into epochs and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub windows_per_epoch: usize,
    pub train_epochs: Vec<usize>,
    pub test_epochs: Vec<usize>,
    /// Keep every `sample_stride`-th window.
    pub sample_stride: usize,
    /// Spatial subsampling factor (1 or 2).
    pub subsample: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            windows_per_epoch: 3000,
            train_epochs: vec![0, 1],
            test_epochs: vec![2],
            sample_stride: 3,
            subsample: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.train_epochs.is_empty() || self.test_epochs.is_empty() {
            problems.push("need at least one train and one test epoch".to_string());
        }
        if let Some(e) = self.train_epochs.iter().find(|e| self.test_epochs.contains(e)) {
            problems.push(format!("epoch {e} appears in both splits"));
        }
        if self.windows_per_epoch == 0 || self.sample_stride == 0 {
            problems.push("windows_per_epoch and sample_stride must be positive".to_string());
        }
        if self.sample_stride > self.windows_per_epoch {
            problems.push("sample_stride exceeds windows_per_epoch".to_string());
        }
        if self.subsample != 1 && self.subsample != 2 {
            problems.push(format!("subsample {} not in {{1, 2}}", self.subsample));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn epoch_count(&self) -> usize {
        self.train_epochs
            .iter()
            .chain(&self.test_epochs)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Per-channel ranges over the training split. Tendency ranges are
/// symmetric about zero so that a zero network output is a zero tendency.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub channels: Vec<String>,
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
    pub tendency_min: Vec<f64>,
    pub tendency_max: Vec<f64>,
}

impl NormalizationStats {
    /// Computes ranges from `(C·L)` channel-major vectors.
    pub fn from_samples<'a>(
        channels: &[String],
        len: usize,
        states: impl Iterator<Item = &'a [f64]> + Clone,
        tendencies: impl Iterator<Item = &'a [f64]> + Clone,
    ) -> Result<Self> {
        let c = channels.len();
        let mut smin = vec![f64::INFINITY; c];
        let mut smax = vec![f64::NEG_INFINITY; c];
        let mut tabs = vec![0.0f64; c];
        for s in states {
            for ch in 0..c {
                for v in &s[ch * len..(ch + 1) * len] {
                    smin[ch] = smin[ch].min(*v);
                    smax[ch] = smax[ch].max(*v);
                }
            }
        }
        for t in tendencies {
            for ch in 0..c {
                for v in &t[ch * len..(ch + 1) * len] {
                    tabs[ch] = tabs[ch].max(v.abs());
                }
            }
        }
        let stats = Self {
            channels: channels.to_vec(),
            state_min: smin,
            state_max: smax,
            tendency_min: tabs.iter().map(|a| -a).collect(),
            tendency_max: tabs,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, name) in self.channels.iter().enumerate() {
            let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && hi > lo;
            if !ok(self.state_min[i], self.state_max[i]) || !ok(self.tendency_min[i], self.tendency_max[i]) {
                return Err(Error::Degenerate(format!("degenerate channel `{name}` (max = min)")));
            }
        }
        Ok(())
    }

    fn range(&self, q: Quantity, c: usize) -> (f64, f64) {
        match q {
            Quantity::State => (self.state_min[c], self.state_max[c]),
            Quantity::Tendency => (self.tendency_min[c], self.tendency_max[c]),
        }
    }

    /// Maps `(C·L)` channel-major values to `[−1, 1]`.
    pub fn normalize_values(&self, q: Quantity, values: &[f64]) -> Vec<f64> {
        let len = values.len() / self.channels.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = self.range(q, i / len);
                2.0 * (v - lo) / (hi - lo) - 1.0
            })
            .collect()
    }

    pub fn denormalize_values(&self, q: Quantity, values: &[f64]) -> Vec<f64> {
        let len = values.len() / self.channels.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (lo, hi) = self.range(q, i / len);
                lo + (v + 1.0) * (hi - lo) / 2.0
            })
            .collect()
    }

    /// Content digest used to tie checkpoints and runs to a dataset.
    pub fn digest(&self) -> String {
        let mut text = String::new();
        for (i, c) in self.channels.iter().enumerate() {
            text.push_str(&format!(
                "{c} {} {} {} {}\n",
                self.state_min[i], self.state_max[i], self.tendency_min[i], self.tendency_max[i]
            ));
        }
        artifact::sha256_hex(text.as_bytes())
    }

    pub(crate) fn write_header(&self, h: &mut Header) {
        for (i, c) in self.channels.iter().enumerate() {
            h.push(
                "stats",
                format!(
                    "{c} {} {} {} {}",
                    self.state_min[i], self.state_max[i], self.tendency_min[i], self.tendency_max[i]
                ),
            );
        }
    }

    pub(crate) fn read_header(h: &Header) -> Result<Self> {
        let mut s = Self {
            channels: Vec::new(),
            state_min: Vec::new(),
            state_max: Vec::new(),
            tendency_min: Vec::new(),
            tendency_max: Vec::new(),
        };
        for line in h.all("stats") {
            let parts: Vec<&str> = line.split(' ').collect();
            let nums: Option<Vec<f64>> = parts.get(1..5).map(|p| p.iter().filter_map(|v| v.parse().ok()).collect());
            match nums {
                Some(n) if parts.len() == 5 && n.len() == 4 => {
                    s.channels.push(parts[0].to_string());
                    s.state_min.push(n[0]);
                    s.state_max.push(n[1]);
                    s.tendency_min.push(n[2]);
                    s.tendency_max.push(n[3]);
                }
                _ => return Err(Error::format(format!("bad stats line `{line}`"))),
            }
        }
        if s.channels.is_empty() {
            return Err(Error::format("no normalization stats in header"));
        }
        s.validate()?;
        Ok(s)
    }
}

fn stats_index(stats: &NormalizationStats, name: &str) -> Result<usize> {
    stats
        .channels
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::config(format!("no normalization stats for channel `{name}`")))
}

pub fn normalize(field: &Field, stats: &NormalizationStats, q: Quantity) -> Result<Field> {
    map_field(field, stats, q, true)
}

pub fn denormalize(field: &Field, stats: &NormalizationStats, q: Quantity) -> Result<Field> {
    map_field(field, stats, q, false)
}

fn map_field(field: &Field, stats: &NormalizationStats, q: Quantity, forward: bool) -> Result<Field> {
    let len = field.len();
    let mut out = Vec::with_capacity(field.values.len());
    for (c, name) in field.names.iter().enumerate() {
        let (lo, hi) = stats.range(q, stats_index(stats, name)?);
        out.extend(field.channel(c).iter().map(|v| {
            if forward {
                2.0 * (v - lo) / (hi - lo) - 1.0
            } else {
                lo + (v + 1.0) * (hi - lo) / 2.0
            }
        }));
    }
    Field::new(field.names.clone(), Tensor::new([field.names.len(), len], out)?)
}

/// One normalized training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub epoch: usize,
    pub window: usize,
    /// `(C·L)` normalized instantaneous state at the window start.
    pub state: Vec<f64>,
    /// `(C·L)` normalized window-mean tendency.
    pub tendency: Vec<f64>,
    /// `(M·L)` metadata.
    pub meta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub channels: Vec<String>,
    pub meta_channels: Vec<String>,
    pub length: usize,
    pub window: usize,
    pub subsample: usize,
    pub epochs: Vec<usize>,
    pub forcing: f64,
    pub stats: NormalizationStats,
    pub config_digest: String,
    pub samples: Vec<Sample>,
    /// Set when the file was written by an older minor version.
    pub migration: Option<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks samples `idx` into `(B, C, L)` state, tendency and `(B, M, L)`
    /// metadata tensors.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let (c, m, l) = (self.channels.len(), self.meta_channels.len(), self.length);
        let mut s = Vec::with_capacity(idx.len() * c * l);
        let mut t = Vec::with_capacity(idx.len() * c * l);
        let mut md = Vec::with_capacity(idx.len() * m * l);
        for &i in idx {
            let smp = &self.samples[i];
            s.extend_from_slice(&smp.state);
            t.extend_from_slice(&smp.tendency);
            md.extend_from_slice(&smp.meta);
        }
        let b = idx.len();
        Ok((
            Tensor::new([b, c, l], s)?,
            Tensor::new([b, c, l], t)?,
            Tensor::new([b, m, l], md)?,
        ))
    }

    /// Per-site loss weights: 0 at masked sites, read from the `mask`
    /// metadata channel.
    pub fn site_weights(&self) -> Option<Vec<f64>> {
        let mc = self.meta_channels.iter().position(|c| c == "mask")?;
        let mask = &self.samples.first()?.meta[mc * self.length..(mc + 1) * self.length];
        if mask.iter().all(|v| *v == 1.0) {
            None
        } else {
            Some(mask.to_vec())
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::default();
        h.push("split", self.split.as_str());
        h.push("samples", self.samples.len());
        h.push("channels", self.channels.len());
        h.push("length", self.length);
        h.push("meta", self.meta_channels.len());
        h.push("window", self.window);
        h.push("subsample", self.subsample);
        h.push("forcing", self.forcing);
        h.push(
            "epochs",
            self.epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
        );
        h.push("config", &self.config_digest);
        for c in &self.channels {
            h.push("channel", c);
        }
        for c in &self.meta_channels {
            h.push("meta_channel", c);
        }
        self.stats.write_header(&mut h);
        let mut payload = Vec::new();
        for s in &self.samples {
            payload.extend_from_slice(&(s.epoch as u64).to_le_bytes());
            payload.extend_from_slice(&(s.window as u64).to_le_bytes());
            artifact::put_f64s(&mut payload, &s.state);
            artifact::put_f64s(&mut payload, &s.tendency);
            artifact::put_f64s(&mut payload, &s.meta);
        }
        artifact::encode(DATASET_MAGIC, DATASET_VERSION, &h, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = artifact::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let h = &f.header;
        let split = match h.require("split")? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::format(format!("unknown split `{other}`"))),
        };
        let n: usize = h.parse("samples")?;
        let c: usize = h.parse("channels")?;
        let l: usize = h.parse("length")?;
        let m: usize = h.parse("meta")?;
        // 1.0 files predate spatial subsampling
        let subsample = if f.version.minor == 0 { 1 } else { h.parse("subsample")? };
        let channels: Vec<String> = h.all("channel").map(String::from).collect();
        let meta_channels: Vec<String> = h.all("meta_channel").map(String::from).collect();
        if channels.len() != c || meta_channels.len() != m {
            return Err(Error::format("channel tables disagree with counts"));
        }
        let epochs = h
            .require("epochs")?
            .split(',')
            .map(|e| e.parse().map_err(|_| Error::format("bad epoch list")))
            .collect::<Result<Vec<usize>>>()?;
        let mut r = PayloadReader::new(&f.payload);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(Sample {
                epoch: r.u64()? as usize,
                window: r.u64()? as usize,
                state: r.f64s(c * l)?,
                tendency: r.f64s(c * l)?,
                meta: r.f64s(m * l)?,
            });
        }
        r.finish()?;
        Ok(Self {
            split,
            channels,
            meta_channels,
            length: l,
            window: h.parse("window")?,
            subsample,
            epochs,
            forcing: h.parse("forcing")?,
            stats: NormalizationStats::read_header(h)?,
            config_digest: h.require("config")?.to_string(),
            samples,
            migration: f.migration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Rejects pairs of splits that share a simulation epoch.
pub fn check_disjoint_epochs(a: &[usize], b: &[usize]) -> Result<()> {
    match a.iter().find(|e| b.contains(e)) {
        Some(e) => Err(Error::config(format!("splits overlap in epoch {e}"))),
        None => Ok(()),
    }
}

fn subsample_sites(v: &[f64], factor: usize) -> Vec<f64> {
    v.iter().step_by(factor).copied().collect()
}

/// Runs the reference and the nudged model over all epochs, then extracts
/// normalized train and test splits with statistics from the train split
/// only.
pub fn build_dataset(
    cfg: &SystemConfig,
    spec: &DatasetSpec,
    seed: u64,
    config_digest: &str,
) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    spec.validate()?;
    let windows = spec.epoch_count() * spec.windows_per_epoch;
    let reference = reference_run(cfg, seed, windows)?;
    let run = run_nudged(cfg, &reference, windows)?;

    let f = spec.subsample;
    if cfg.sites % f != 0 {
        return Err(Error::config("sites not divisible by the subsample factor"));
    }
    let len = cfg.sites / f;
    let mask = subsample_sites(&cfg.site_mask(), f);
    let meta = build_metadata(cfg.forcing, len, &mask)?;
    let channels = vec!["x".to_string()];

    let pick = |epochs: &[usize]| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &e in epochs {
            for w in (0..spec.windows_per_epoch).step_by(spec.sample_stride) {
                out.push((e, e * spec.windows_per_epoch + w));
            }
        }
        out
    };
    let train_idx = pick(&spec.train_epochs);
    let test_idx = pick(&spec.test_epochs);

    let physical = |w: usize| {
        let p = &run.pairs[w];
        (subsample_sites(&p.state, f), subsample_sites(&p.tendency, f))
    };
    let train_phys: Vec<_> = train_idx.iter().map(|(_, w)| physical(*w)).collect();
    let stats = NormalizationStats::from_samples(
        &channels,
        len,
        train_phys.iter().map(|(s, _)| s.as_slice()),
        train_phys.iter().map(|(_, t)| t.as_slice()),
    )?;

    let make = |split: Split, idx: &[(usize, usize)], epochs: &[usize]| -> Dataset {
        let samples = idx
            .iter()
            .map(|&(e, w)| {
                let (s, t) = physical(w);
                Sample {
                    epoch: e,
                    window: w,
                    state: stats.normalize_values(Quantity::State, &s),
                    tendency: stats.normalize_values(Quantity::Tendency, &t),
                    meta: meta.values.data().to_vec(),
                }
            })
            .collect();
        Dataset {
            split,
            channels: channels.clone(),
            meta_channels: METADATA_CHANNELS.iter().map(|s| s.to_string()).collect(),
            length: len,
            window: cfg.window,
            subsample: f,
            epochs: epochs.to_vec(),
            forcing: cfg.forcing,
            stats: stats.clone(),
            config_digest: config_digest.to_string(),
            samples,
            migration: None,
        }
    };
    let train = make(Split::Train, &train_idx, &spec.train_epochs);
    let test = make(Split::Test, &test_idx, &spec.test_epochs);
    check_disjoint_epochs(&train.epochs, &test.epochs)?;
    Ok((train, test))
}
