//! Online coupling of a corrector into the free-running biased model, and
//! comparison of the resulting climates against the reference.

mod record;

pub use record::{Provenance, RunRecord, RUN_MAGIC, RUN_VERSION};

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::conditioning::{build_metadata, METADATA_CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::{self, fmt_opt, fmt_value};
use crate::tensor::{kernels, Tensor};
use crate::toyclimate::{self, initial_state, step_free, step_truth, Quantity, SystemConfig};
use crate::archs::ModelGraph;
use crate::toyclimate::NormalizationStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cadence {
    /// Evaluate once per window, at its first step.
    WindowStart,
    /// Evaluate and inject at every step.
    EveryStep,
}

impl Cadence {
    pub fn as_str(self) -> &'static str {
        match self {
            Cadence::WindowStart => "window_start",
            Cadence::EveryStep => "every_step",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Cadence::WindowStart, Cadence::EveryStep].into_iter().find(|c| c.as_str() == s)
    }
}

/// How a predicted window-mean tendency is delivered under
/// [`Cadence::WindowStart`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    /// `W ·` tendency during the first step only.
    Impulse,
    /// The unscaled tendency during every step of the window.
    Spread,
}

impl Scaling {
    pub fn as_str(self) -> &'static str {
        match self {
            Scaling::Impulse => "impulse",
            Scaling::Spread => "spread",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Scaling::Impulse, Scaling::Spread].into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingConfig {
    pub cadence: Cadence,
    pub scaling: Scaling,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// Optional bound on `|injected tendency|` per site.
    pub cap: Option<f64>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            cadence: Cadence::WindowStart,
            scaling: Scaling::Impulse,
            horizon: 100,
            seeds: vec![100, 101, 102, 103, 104],
            cap: None,
        }
    }
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.horizon == 0 {
            problems.push("horizon must be positive".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".to_string());
        }
        if let Some(c) = self.cap {
            if !(c > 0.0) {
                problems.push(format!("cap = {c} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// A trained network wrapped for online use: physical state in, physical
/// window-mean tendency out.
#[derive(Clone, Debug)]
pub struct NeuralCorrector {
    model: ModelGraph,
    stats: NormalizationStats,
    meta: Tensor,
    mask: Vec<f64>,
    factor: usize,
}

impl NeuralCorrector {
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &SystemConfig, expected_stats: Option<&str>) -> Result<Self> {
        if let Some(d) = expected_stats {
            if d != ck.stats.digest() {
                return Err(Error::Digest {
                    expected: d.to_string(),
                    found: ck.stats.digest(),
                });
            }
        }
        if ck.window != cfg.window {
            return Err(Error::config(format!(
                "checkpoint trained on {}-step windows, run uses {}",
                ck.window, cfg.window
            )));
        }
        if ck.meta_channels != METADATA_CHANNELS {
            return Err(Error::config("checkpoint metadata channels differ from the coupler's"));
        }
        if ck.stats.channels != ["x"] {
            return Err(Error::config("checkpoint channels differ from the ring state"));
        }
        let len = ck.arch.length;
        if len == 0 || cfg.sites % len != 0 || !matches!(cfg.sites / len, 1 | 2) {
            return Err(Error::config(format!("checkpoint length {len} does not fit {} sites", cfg.sites)));
        }
        let factor = cfg.sites / len;
        let mask: Vec<f64> = cfg.site_mask();
        let coarse_mask: Vec<f64> = mask.iter().step_by(factor).copied().collect();
        let meta = build_metadata(cfg.forcing, len, &coarse_mask)?.values;
        Ok(Self {
            model: ck.to_model()?,
            stats: ck.stats.clone(),
            meta,
            mask,
            factor,
        })
    }

    pub fn predict(&self, state: &[f64]) -> Result<Vec<f64>> {
        let coarse: Vec<f64> = state.iter().step_by(self.factor).copied().collect();
        let x = self.stats.normalize_values(Quantity::State, &coarse);
        let len = x.len();
        let y = self.model.predict(&Tensor::new([1, 1, len], x)?, &self.meta)?;
        let mut t = self.stats.denormalize_values(Quantity::Tendency, y.data());
        if self.factor > 1 {
            t = kernels::upsample_linear1d(&Tensor::new([1, 1, len], t)?, self.factor)?.into_data();
        }
        Ok(t.iter().zip(&self.mask).map(|(v, m)| v * m).collect())
    }
}

/// Source of the injected correction.
#[derive(Clone, Debug)]
pub enum Corrector {
    Zero,
    /// Replays archived window-mean tendencies, one row per window.
    StoredOracle(Vec<Vec<f64>>),
    Neural(Box<NeuralCorrector>),
}

impl Corrector {
    pub fn name(&self) -> &'static str {
        match self {
            Corrector::Zero => "zero",
            Corrector::StoredOracle(_) => "stored_oracle",
            Corrector::Neural(_) => "neural",
        }
    }

    /// Window-mean tendency for window `w` given the model state.
    pub fn tendency(&self, w: usize, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Corrector::Zero => Ok(vec![0.0; state.len()]),
            Corrector::StoredOracle(rows) => rows
                .get(w)
                .cloned()
                .ok_or_else(|| Error::config(format!("stored tendencies end before window {w}"))),
            Corrector::Neural(n) => n.predict(state),
        }
    }
}

/// Spun-up reference state for `seed`; control and corrected runs both start
/// here.
pub fn initial_condition(cfg: &SystemConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut s = initial_state(cfg, seed);
    for step in 0..cfg.spinup_steps {
        s = step_truth(&s, cfg).map_err(|e| match e {
            Error::Blowup { detail, .. } => Error::Blowup { step, detail },
            other => other,
        })?;
    }
    Ok(s.slow)
}

fn config_digest(cfg: &SystemConfig, coupling: Option<&CouplingConfig>) -> String {
    crate::artifact::sha256_hex(format!("{cfg:?}{coupling:?}").as_bytes())
}

/// Free run of the biased model from the seed's initial condition.
pub fn run_controlled(cfg: &SystemConfig, horizon: usize, seed: u64) -> Result<RunRecord> {
    let x0 = initial_condition(cfg, seed)?;
    let snapshots = toyclimate::free_run(cfg, &x0, horizon)?;
    Ok(RunRecord {
        provenance: Provenance::Control,
        label: "control".into(),
        config_digest: config_digest(cfg, None),
        seed,
        window: cfg.window,
        snapshots,
    })
}

/// Nudged run over the same period as the control run for `seed`, with its
/// archived window-mean tendencies.
pub fn run_nudged_record(cfg: &SystemConfig, horizon: usize, seed: u64) -> Result<(RunRecord, Vec<Vec<f64>>)> {
    let reference = toyclimate::reference_run(cfg, seed, horizon)?;
    let run = toyclimate::run_nudged(cfg, &reference, horizon)?;
    let record = RunRecord {
        provenance: Provenance::Nudged,
        label: "nudged".into(),
        config_digest: config_digest(cfg, None),
        seed,
        window: cfg.window,
        snapshots: run.boundaries,
    };
    Ok((record, run.pairs.into_iter().map(|p| p.tendency).collect()))
}

/// Reference slow state at every window boundary for `seed`.
pub fn truth_record(cfg: &SystemConfig, horizon: usize, seed: u64) -> Result<RunRecord> {
    let reference = toyclimate::reference_run(cfg, seed, horizon)?;
    Ok(RunRecord {
        provenance: Provenance::Truth,
        label: "truth".into(),
        config_digest: config_digest(cfg, None),
        seed,
        window: cfg.window,
        snapshots: reference.snapshots,
    })
}

#[derive(Clone, Debug)]
pub struct CorrectedRun {
    pub record: RunRecord,
    /// Corrector output evaluated in each window, physical units.
    pub predictions: Vec<Vec<f64>>,
    /// Total state increment injected in each window.
    pub increments: Vec<Vec<f64>>,
}

/// Biased model plus the corrector's tendency. Each step is the free RK4
/// step followed by `dt ·` injected tendency; steps with no injection are
/// exactly free steps. The run never sees reference data.
pub fn run_corrected(
    cfg: &SystemConfig,
    coupling: &CouplingConfig,
    corrector: &Corrector,
    horizon: usize,
    seed: u64,
    label: &str,
) -> Result<CorrectedRun> {
    coupling.validate()?;
    let mut x = initial_condition(cfg, seed)?;
    let w_steps = cfg.window;
    let mut snapshots = vec![x.clone()];
    let mut predictions = Vec::with_capacity(horizon);
    let mut increments = Vec::with_capacity(horizon);
    let clip = |v: f64| coupling.cap.map_or(v, |c| v.clamp(-c, c));
    for w in 0..horizon {
        let mut window_pred = corrector.tendency(w, &x)?;
        predictions.push(window_pred.clone());
        let mut added = vec![0.0; cfg.sites];
        for i in 0..w_steps {
            let inject: Vec<f64> = match (coupling.cadence, coupling.scaling) {
                (Cadence::EveryStep, _) => {
                    if i > 0 {
                        window_pred = corrector.tendency(w, &x)?;
                    }
                    window_pred.iter().map(|v| clip(*v)).collect()
                }
                (Cadence::WindowStart, Scaling::Impulse) if i == 0 => {
                    window_pred.iter().map(|v| clip(v * w_steps as f64)).collect()
                }
                (Cadence::WindowStart, Scaling::Impulse) => Vec::new(),
                (Cadence::WindowStart, Scaling::Spread) => window_pred.iter().map(|v| clip(*v)).collect(),
            };
            x = step_free(&x, cfg).map_err(|e| match e {
                Error::Blowup { detail, .. } => Error::Blowup {
                    step: w * w_steps + i,
                    detail,
                },
                other => other,
            })?;
            for (k, t) in inject.iter().enumerate() {
                let inc = cfg.dt * t;
                if inc != 0.0 {
                    x[k] += inc;
                    added[k] += inc;
                }
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Blowup {
                    step: w * w_steps + i,
                    detail: "non-finite corrected state".into(),
                });
            }
        }
        increments.push(added);
        snapshots.push(x.clone());
    }
    Ok(CorrectedRun {
        record: RunRecord {
            provenance: Provenance::Corrected,
            label: label.to_string(),
            config_digest: config_digest(cfg, Some(coupling)),
            seed,
            window: cfg.window,
            snapshots,
        },
        predictions,
        increments,
    })
}

/// One row of the climate comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ClimateRow {
    pub label: String,
    pub provenance: Provenance,
    /// RMSE of window-boundary states against the reference.
    pub rmse: f64,
    /// `100 · (rmse − control) / control`.
    pub pct_change: f64,
    /// RMS over sites of the time-mean bias.
    pub climatology_rmse: f64,
    pub mean_bias: f64,
    /// Pattern correlation of the time-mean state with the reference's.
    pub time_mean_pcc: Option<f64>,
    /// Time-mean bias per site.
    pub bias_profile: Vec<f64>,
    /// Sites where the bias is significant.
    pub significant: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClimateReport {
    pub alpha: f64,
    pub rows: Vec<ClimateRow>,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Compares runs against the reference. The first control run is the
/// baseline for percent changes.
pub fn climatology_compare(records: &[RunRecord], truth: &RunRecord, alpha: f64) -> Result<ClimateReport> {
    let control = records
        .iter()
        .find(|r| r.provenance == Provenance::Control)
        .ok_or_else(|| Error::config("comparison needs a control run"))?;
    for r in records {
        if r.snapshots.len() != truth.snapshots.len() {
            return Err(Error::config(format!(
                "run `{}` covers {} windows, reference covers {}",
                r.label,
                r.horizon(),
                truth.horizon()
            )));
        }
        if r.sites() != truth.sites() {
            return Err(Error::shape(format!("run `{}` is on a different grid", r.label)));
        }
    }
    let sites = truth.sites();
    let n = truth.snapshots.len() as f64;
    let truth_mean: Vec<f64> = (0..sites)
        .map(|k| truth.snapshots.iter().map(|s| s[k]).sum::<f64>() / n)
        .collect();
    let rmse_of = |r: &RunRecord| toyclimate::trajectory_rmse(&r.snapshots, &truth.snapshots);
    let base = rmse_of(control)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let rmse = rmse_of(r)?;
        let mean: Vec<f64> = (0..sites).map(|k| r.snapshots.iter().map(|s| s[k]).sum::<f64>() / n).collect();
        let bias: Vec<f64> = mean.iter().zip(&truth_mean).map(|(a, b)| a - b).collect();
        let series: Vec<Vec<f64>> = (0..sites)
            .map(|k| r.snapshots.iter().zip(&truth.snapshots).map(|(a, b)| a[k] - b[k]).collect())
            .collect();
        let significant = series
            .iter()
            .map(|s| metrics::zero_mean_p_value(s).map(|p| p < alpha).or_else(|e| match e {
                Error::Degenerate(_) => Ok(true),
                other => Err(other),
            }))
            .collect::<Result<Vec<bool>>>()?;
        rows.push(ClimateRow {
            label: r.label.clone(),
            provenance: r.provenance,
            rmse,
            pct_change: if base > 0.0 { 100.0 * (rmse - base) / base } else { 0.0 },
            climatology_rmse: rms(&bias),
            mean_bias: bias.iter().sum::<f64>() / sites as f64,
            time_mean_pcc: metrics::pearson(&mean, &truth_mean),
            bias_profile: bias,
            significant,
        });
    }
    Ok(ClimateReport { alpha, rows })
}

impl ClimateReport {
    /// One row per run: error columns then the significant-site count.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,provenance,rmse,pct_change_vs_control,climatology_rmse,mean_bias,significant_sites\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                r.provenance.as_str(),
                fmt_value(r.rmse),
                fmt_value(r.pct_change),
                fmt_value(r.climatology_rmse),
                fmt_value(r.mean_bias),
                r.significant.iter().filter(|m| **m).count()
            );
        }
        s
    }

    pub fn pcc_csv(&self) -> String {
        let mut s = String::from("run,time_mean_pcc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.label, fmt_opt(r.time_mean_pcc));
        }
        s
    }

    /// Per-site bias profile with the significance mask.
    pub fn bias_csv(&self) -> String {
        let mut s = String::from("run,site,bias,significant\n");
        for r in &self.rows {
            for (k, b) in r.bias_profile.iter().enumerate() {
                let _ = writeln!(s, "{},{k},{},{}", r.label, fmt_value(*b), u8::from(r.significant[k]));
            }
        }
        s
    }
}
