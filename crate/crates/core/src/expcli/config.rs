use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::archs::{preset, ArchitectureConfig, Preset, Variant};
use crate::artifact::sha256_hex;
use crate::conditioning::METADATA_CHANNELS;
use crate::coupler::{Cadence, CouplingConfig, Scaling};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::PadMode;
use crate::toyclimate::{DatasetSpec, SystemConfig};
use crate::trainer::{LrSchedule, TrainConfig};

/// Model choice; the layer widths come from the named preset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub variant: Variant,
    pub preset: Preset,
    pub padding: PadMode,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Unet,
            preset: Preset::Small,
            padding: PadMode::Circular,
            activation: Activation::Relu,
            dropout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub ridge_lambda: f64,
    pub coupling: CouplingConfig,
    /// Significance level of the bias maps.
    pub alpha: f64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            system: SystemConfig::default(),
            dataset: DatasetSpec::default(),
            model: ModelSection::default(),
            training: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            ridge_lambda: 1e-3,
            coupling: CouplingConfig::default(),
            alpha: 0.05,
            output: PathBuf::from("out"),
        }
    }
}

fn pad_str(p: PadMode) -> &'static str {
    match p {
        PadMode::Zero => "zero",
        PadMode::Circular => "circular",
    }
}

fn parse_pad(s: &str) -> Option<PadMode> {
    match s {
        "zero" => Some(PadMode::Zero),
        "circular" => Some(PadMode::Circular),
        _ => None,
    }
}

/// Reads one table, remembering which keys were consumed and collecting
/// every problem instead of stopping at the first.
struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
    used: Vec<&'a str>,
    problems: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, table: Option<&'a Table>, problems: &'a mut Vec<String>) -> Self {
        Self {
            name,
            table,
            used: Vec::new(),
            problems,
        }
    }

    fn raw(&mut self, key: &'a str) -> Option<&'a Value> {
        self.used.push(key);
        self.table?.get(key)
    }

    fn bad(&mut self, key: &str, expected: &str, v: &Value) {
        self.problems.push(format!("{}.{key}: expected {expected}, found `{v}`", self.name));
    }

    fn usize(&mut self, key: &'a str, out: &mut usize) {
        if let Some(v) = self.raw(key) {
            match v.as_integer().and_then(|i| usize::try_from(i).ok()) {
                Some(i) => *out = i,
                None => self.bad(key, "a non-negative integer", v),
            }
        }
    }

    fn f64(&mut self, key: &'a str, out: &mut f64) {
        if let Some(v) = self.raw(key) {
            match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
                Some(x) => *out = x,
                None => self.bad(key, "a number", v),
            }
        }
    }

    fn opt_f64(&mut self, key: &'a str, out: &mut Option<f64>) {
        let mut x = out.unwrap_or(0.0);
        let before = self.problems.len();
        if self.table.is_some_and(|t| t.contains_key(key)) {
            self.f64(key, &mut x);
            if self.problems.len() == before {
                *out = Some(x);
            }
        } else {
            self.used.push(key);
        }
    }

    fn opt_usize(&mut self, key: &'a str, out: &mut Option<usize>) {
        let mut x = out.unwrap_or(0);
        let before = self.problems.len();
        if self.table.is_some_and(|t| t.contains_key(key)) {
            self.usize(key, &mut x);
            if self.problems.len() == before {
                *out = Some(x);
            }
        } else {
            self.used.push(key);
        }
    }

    fn list<T: TryFrom<i64>>(&mut self, key: &'a str, out: &mut Vec<T>) {
        if let Some(v) = self.raw(key) {
            let parsed = v.as_array().and_then(|a| {
                a.iter()
                    .map(|e| e.as_integer().and_then(|i| T::try_from(i).ok()))
                    .collect::<Option<Vec<T>>>()
            });
            match parsed {
                Some(list) => *out = list,
                None => self.bad(key, "a list of non-negative integers", v),
            }
        }
    }

    fn choice<T>(&mut self, key: &'a str, out: &mut T, parse: impl Fn(&str) -> Option<T>, options: &str) {
        if let Some(v) = self.raw(key) {
            match v.as_str().and_then(&parse) {
                Some(x) => *out = x,
                None => self.bad(key, &format!("one of {options}"), v),
            }
        }
    }

    fn string(&mut self, key: &'a str, out: &mut String) {
        if let Some(v) = self.raw(key) {
            match v.as_str() {
                Some(s) => *out = s.to_string(),
                None => self.bad(key, "a string", v),
            }
        }
    }

    fn finish(self) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.used.contains(&k.as_str()) {
                    self.problems.push(format!("{}.{k}: unknown key", self.name));
                }
            }
        }
    }
}

const SECTIONS: [&str; 6] = ["system", "dataset", "model", "training", "coupling", "output"];

fn push_validation(problems: &mut Vec<String>, section: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(msg)) => problems.extend(msg.split("; ").map(|m| format!("{section}: {m}"))),
        Err(e) => problems.push(format!("{section}: {e}")),
    }
}

impl ExperimentConfig {
    /// Strict parse: unknown sections or keys, wrong types and failed
    /// validations are all reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config is not valid TOML: {}", e.message())))?;
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (k, v) in &root {
            match (k.as_str(), v) {
                ("seed", Value::Integer(i)) if *i >= 0 => cfg.seed = *i as u64,
                ("seed", v) => problems.push(format!("seed: expected a non-negative integer, found `{v}`")),
                (name, Value::Table(_)) if SECTIONS.contains(&name) => {}
                (name, Value::Table(_)) => problems.push(format!("{name}: unknown section")),
                (name, _) => problems.push(format!("{name}: unknown top-level key")),
            }
        }
        let table = |name: &str| root.get(name).and_then(Value::as_table);

        let s = &mut cfg.system;
        let mut sec = Section::new("system", table("system"), &mut problems);
        sec.usize("sites", &mut s.sites);
        sec.usize("fast_per_site", &mut s.fast_per_site);
        sec.f64("forcing", &mut s.forcing);
        sec.f64("coupling", &mut s.coupling);
        sec.f64("fast_timescale", &mut s.fast_timescale);
        sec.f64("fast_amplitude", &mut s.fast_amplitude);
        sec.f64("dt", &mut s.dt);
        sec.usize("window", &mut s.window);
        let tau_given = table("system").is_some_and(|t| t.contains_key("tau"));
        sec.f64("tau", &mut s.tau);
        sec.usize("spinup_steps", &mut s.spinup_steps);
        sec.usize("transient_steps", &mut s.transient_steps);
        sec.list("masked_sites", &mut s.masked_sites);
        sec.finish();
        if !tau_given {
            s.tau = 2.0 * s.window as f64 * s.dt;
        }

        let d = &mut cfg.dataset;
        let mut sec = Section::new("dataset", table("dataset"), &mut problems);
        sec.usize("windows_per_epoch", &mut d.windows_per_epoch);
        sec.list("train_epochs", &mut d.train_epochs);
        sec.list("test_epochs", &mut d.test_epochs);
        sec.usize("sample_stride", &mut d.sample_stride);
        sec.usize("subsample", &mut d.subsample);
        sec.finish();

        let m = &mut cfg.model;
        let mut sec = Section::new("model", table("model"), &mut problems);
        sec.choice("variant", &mut m.variant, Variant::parse, "unet, unet_mp, iunet, mnm");
        sec.choice("preset", &mut m.preset, Preset::parse, "toy, small, large");
        sec.choice("padding", &mut m.padding, parse_pad, "zero, circular");
        sec.choice("activation", &mut m.activation, Activation::parse, "relu, gelu");
        sec.f64("dropout", &mut m.dropout);
        sec.finish();

        let t = &mut cfg.training;
        let mut sec = Section::new("training", table("training"), &mut problems);
        sec.usize("epochs", &mut t.epochs);
        sec.usize("batch_size", &mut t.batch_size);
        sec.f64("lr", &mut t.lr);
        sec.f64("weight_decay", &mut t.weight_decay);
        sec.opt_usize("patience", &mut t.patience);
        sec.usize("checkpoint_every", &mut t.checkpoint_every);
        sec.f64("norm_momentum", &mut t.norm_momentum);
        sec.choice("schedule", &mut t.schedule, LrSchedule::parse, "constant, cosine");
        sec.f64("ridge_lambda", &mut cfg.ridge_lambda);
        sec.finish();

        let c = &mut cfg.coupling;
        let mut sec = Section::new("coupling", table("coupling"), &mut problems);
        sec.choice("cadence", &mut c.cadence, Cadence::parse, "window_start, every_step");
        sec.choice("scaling", &mut c.scaling, Scaling::parse, "impulse, spread");
        sec.usize("horizon", &mut c.horizon);
        sec.list("seeds", &mut c.seeds);
        sec.opt_f64("cap", &mut c.cap);
        sec.f64("alpha", &mut cfg.alpha);
        sec.finish();

        let mut dir = cfg.output.to_string_lossy().into_owned();
        let mut sec = Section::new("output", table("output"), &mut problems);
        sec.string("dir", &mut dir);
        sec.finish();
        cfg.output = PathBuf::from(dir);

        cfg.training.seed = cfg.seed;
        if problems.is_empty() {
            cfg.collect_validation(&mut problems);
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn collect_validation(&self, problems: &mut Vec<String>) {
        push_validation(problems, "system", self.system.validate());
        push_validation(problems, "dataset", self.dataset.validate());
        push_validation(problems, "training", self.training.validate());
        push_validation(problems, "coupling", self.coupling.validate());
        if self.dataset.subsample > 0 && self.system.sites % self.dataset.subsample != 0 {
            problems.push(format!(
                "dataset: subsample {} does not divide {} sites",
                self.dataset.subsample, self.system.sites
            ));
        } else {
            push_validation(problems, "model", self.architecture().and_then(|a| a.validate()));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            problems.push(format!("training: ridge_lambda = {} must be non-negative", self.ridge_lambda));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push(format!("coupling: alpha = {} outside (0, 1)", self.alpha));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_validation(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Network configuration at the dataset's (possibly subsampled) length.
    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        let len = self.system.sites / self.dataset.subsample.max(1);
        let mut arch = preset(self.model.variant, self.model.preset, 1, METADATA_CHANNELS.len(), len)?;
        arch.padding = self.model.padding;
        arch.activation = self.model.activation;
        arch.dropout = self.model.dropout;
        Ok(arch)
    }

    /// Fully resolved configuration in the accepted file format, every key
    /// present.
    pub fn to_toml(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        let s = &self.system;
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.training;
        let c = &self.coupling;
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}\n", self.seed);
        let _ = writeln!(out, "[system]");
        let _ = writeln!(out, "sites = {}", s.sites);
        let _ = writeln!(out, "fast_per_site = {}", s.fast_per_site);
        let _ = writeln!(out, "forcing = {:?}", s.forcing);
        let _ = writeln!(out, "coupling = {:?}", s.coupling);
        let _ = writeln!(out, "fast_timescale = {:?}", s.fast_timescale);
        let _ = writeln!(out, "fast_amplitude = {:?}", s.fast_amplitude);
        let _ = writeln!(out, "dt = {:?}", s.dt);
        let _ = writeln!(out, "window = {}", s.window);
        let _ = writeln!(out, "tau = {:?}", s.tau);
        let _ = writeln!(out, "spinup_steps = {}", s.spinup_steps);
        let _ = writeln!(out, "transient_steps = {}", s.transient_steps);
        let _ = writeln!(out, "masked_sites = [{}]\n", list(&s.masked_sites));
        let _ = writeln!(out, "[dataset]");
        let _ = writeln!(out, "windows_per_epoch = {}", d.windows_per_epoch);
        let _ = writeln!(out, "train_epochs = [{}]", list(&d.train_epochs));
        let _ = writeln!(out, "test_epochs = [{}]", list(&d.test_epochs));
        let _ = writeln!(out, "sample_stride = {}", d.sample_stride);
        let _ = writeln!(out, "subsample = {}\n", d.subsample);
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "variant = \"{}\"", m.variant.as_str());
        let _ = writeln!(out, "preset = \"{}\"", m.preset.as_str());
        let _ = writeln!(out, "padding = \"{}\"", pad_str(m.padding));
        let _ = writeln!(out, "activation = \"{}\"", m.activation.as_str());
        let _ = writeln!(out, "dropout = {:?}\n", m.dropout);
        let _ = writeln!(out, "[training]");
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "lr = {:?}", t.lr);
        let _ = writeln!(out, "weight_decay = {:?}", t.weight_decay);
        if let Some(p) = t.patience {
            let _ = writeln!(out, "patience = {p}");
        }
        let _ = writeln!(out, "checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(out, "norm_momentum = {:?}", t.norm_momentum);
        let _ = writeln!(out, "schedule = \"{}\"", t.schedule.as_str());
        let _ = writeln!(out, "ridge_lambda = {:?}\n", self.ridge_lambda);
        let _ = writeln!(out, "[coupling]");
        let _ = writeln!(out, "cadence = \"{}\"", c.cadence.as_str());
        let _ = writeln!(out, "scaling = \"{}\"", c.scaling.as_str());
        let _ = writeln!(out, "horizon = {}", c.horizon);
        let seeds: Vec<String> = c.seeds.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(out, "seeds = [{}]", seeds.join(", "));
        if let Some(cap) = c.cap {
            let _ = writeln!(out, "cap = {cap:?}");
        }
        let _ = writeln!(out, "alpha = {:?}\n", self.alpha);
        let _ = writeln!(out, "[output]");
        let _ = writeln!(out, "dir = {:?}", self.output.to_string_lossy());
        out
    }

    /// Content hash of the resolved configuration. The output directory is
    /// left out so a relocated experiment keeps its digest.
    pub fn digest(&self) -> String {
        let text = self.to_toml();
        let body = text.split("[output]").next().unwrap_or(&text);
        sha256_hex(body.as_bytes())
    }
}
