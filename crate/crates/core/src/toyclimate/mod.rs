//! Two-scale ring system as the reference, its one-scale truncation as the
//! biased model, and nudged runs that archive training pairs.

mod dataset;

pub use dataset::{
    build_dataset, check_disjoint_epochs, denormalize, normalize, Dataset, DatasetSpec, NormalizationStats, Quantity, Sample, Split,
    DATASET_MAGIC, DATASET_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    /// Slow sites on the ring.
    pub sites: usize,
    /// Fast variables per slow site.
    pub fast_per_site: usize,
    pub forcing: f64,
    /// Slow–fast coupling strength.
    pub coupling: f64,
    /// Time-scale ratio of the fast variables.
    pub fast_timescale: f64,
    /// Amplitude ratio of the fast variables.
    pub fast_amplitude: f64,
    pub dt: f64,
    /// Model steps per averaging window.
    pub window: usize,
    /// Nudging relaxation time.
    pub tau: f64,
    pub spinup_steps: usize,
    /// Minimum spin-up for the attractor to be reached.
    pub transient_steps: usize,
    /// Sites whose nudging tendency is zeroed.
    pub masked_sites: Vec<usize>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let dt = 0.001;
        let window = 6;
        Self {
            sites: 36,
            fast_per_site: 10,
            forcing: 10.0,
            coupling: 1.0,
            fast_timescale: 10.0,
            fast_amplitude: 10.0,
            dt,
            window,
            tau: 2.0 * window as f64 * dt,
            spinup_steps: 5000,
            transient_steps: 2000,
            masked_sites: Vec::new(),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.sites < 4 {
            problems.push(format!("sites = {} (need at least 4)", self.sites));
        }
        if self.fast_per_site == 0 {
            problems.push("fast_per_site must be positive".to_string());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt = {} must be positive", self.dt));
        }
        if !(self.tau > 0.0) {
            problems.push(format!("tau = {} must be positive", self.tau));
        }
        if self.window == 0 {
            problems.push("window must be at least 1 step".to_string());
        }
        if self.spinup_steps < self.transient_steps {
            problems.push(format!(
                "spinup_steps = {} shorter than the declared transient {}",
                self.spinup_steps, self.transient_steps
            ));
        }
        for v in [self.forcing, self.coupling, self.fast_timescale, self.fast_amplitude] {
            if !v.is_finite() {
                problems.push("system parameters must be finite".to_string());
                break;
            }
        }
        if self.fast_amplitude == 0.0 {
            problems.push("fast_amplitude must be nonzero".to_string());
        }
        if let Some(s) = self.masked_sites.iter().find(|s| **s >= self.sites) {
            problems.push(format!("masked site {s} outside the ring of {}", self.sites));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// 1 where the nudging tendency is active, 0 at masked sites.
    pub fn site_mask(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.sites];
        for &s in &self.masked_sites {
            if s < m.len() {
                m[s] = 0.0;
            }
        }
        m
    }

    pub fn window_duration(&self) -> f64 {
        self.window as f64 * self.dt
    }
}

/// Slow variables plus the fast ones, grouped by site.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoScaleState {
    pub slow: Vec<f64>,
    pub fast: Vec<f64>,
}

/// Named channels over the ring, stored `(C, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub names: Vec<String>,
    pub values: Tensor,
}

impl Field {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[0] != names.len() {
            return Err(Error::shape(format!(
                "{} channel names for values of shape {:?}",
                names.len(),
                values.shape()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::config(format!("duplicate channel name `{n}`")));
            }
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Self { names, values })
    }

    /// Single channel `x` over the ring.
    pub fn slow(values: &[f64]) -> Result<Self> {
        Self::new(vec!["x".into()], Tensor::new([1, values.len()], values.to_vec())?)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let l = self.len();
        &self.values.data()[c * l..(c + 1) * l]
    }
}

fn advection(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    -x[(k + n - 1) % n] * (x[(k + n - 2) % n] - x[(k + 1) % n])
}

/// One-scale tendency: advection, damping and forcing.
pub fn free_tendency(x: &[f64], forcing: f64) -> Vec<f64> {
    (0..x.len()).map(|k| advection(x, k) - x[k] + forcing).collect()
}

/// Tendencies of the coupled system.
pub fn two_scale_tendency(s: &TwoScaleState, cfg: &SystemConfig) -> (Vec<f64>, Vec<f64>) {
    let (j, c, b, h) = (cfg.fast_per_site, cfg.fast_timescale, cfg.fast_amplitude, cfg.coupling);
    let coef = h * c / b;
    let y = &s.fast;
    let n = y.len();
    let mut dx = free_tendency(&s.slow, cfg.forcing);
    for (k, d) in dx.iter_mut().enumerate() {
        *d -= coef * y[k * j..(k + 1) * j].iter().sum::<f64>();
    }
    let dy = (0..n)
        .map(|i| {
            let adv = -c * b * y[(i + 1) % n] * (y[(i + 2) % n] - y[(i + n - 1) % n]);
            adv - c * y[i] + coef * s.slow[i / j]
        })
        .collect();
    (dx, dy)
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

fn rk4_combine(x: &[f64], dt: f64, k: [&[f64]; 4]) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

/// Classic RK4 step of `ẋ = f(x, t)` from `t`.
pub fn rk4_step<F>(x: &[f64], t: f64, dt: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    let k1 = f(x, t);
    let k2 = f(&axpy(x, dt / 2.0, &k1), t + dt / 2.0);
    let k3 = f(&axpy(x, dt / 2.0, &k2), t + dt / 2.0);
    let k4 = f(&axpy(x, dt, &k3), t + dt);
    rk4_combine(x, dt, [&k1, &k2, &k3, &k4])
}

fn blowup(what: &str) -> Error {
    Error::Blowup {
        step: 0,
        detail: format!("non-finite {what} state"),
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Blowup { detail, .. } => Error::Blowup { step, detail },
        other => other,
    }
}

pub fn step_truth(s: &TwoScaleState, cfg: &SystemConfig) -> Result<TwoScaleState> {
    if s.slow.len() != cfg.sites || s.fast.len() != cfg.sites * cfg.fast_per_site {
        return Err(Error::shape("two-scale state does not match the configuration"));
    }
    if !s.slow.iter().chain(&s.fast).all(|v| v.is_finite()) {
        return Err(blowup("reference input"));
    }
    let dt = cfg.dt;
    let shift = |s: &TwoScaleState, a: f64, d: &(Vec<f64>, Vec<f64>)| TwoScaleState {
        slow: axpy(&s.slow, a, &d.0),
        fast: axpy(&s.fast, a, &d.1),
    };
    let k1 = two_scale_tendency(s, cfg);
    let k2 = two_scale_tendency(&shift(s, dt / 2.0, &k1), cfg);
    let k3 = two_scale_tendency(&shift(s, dt / 2.0, &k2), cfg);
    let k4 = two_scale_tendency(&shift(s, dt, &k3), cfg);
    let out = TwoScaleState {
        slow: rk4_combine(&s.slow, dt, [&k1.0, &k2.0, &k3.0, &k4.0]),
        fast: rk4_combine(&s.fast, dt, [&k1.1, &k2.1, &k3.1, &k4.1]),
    };
    if out.slow.iter().chain(&out.fast).all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(blowup("reference"))
    }
}

pub fn step_free(x: &[f64], cfg: &SystemConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.sites {
        return Err(Error::shape(format!("state has {} sites, expected {}", x.len(), cfg.sites)));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(blowup("model input"));
    }
    let out = rk4_step(x, 0.0, cfg.dt, |x, _| free_tendency(x, cfg.forcing));
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(blowup("model"))
    }
}

/// Relaxation `(reference − model) / tau`.
pub fn nudging_tendency(model: &[f64], reference: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("nudging timescale must be positive, got {tau}")));
    }
    if model.len() != reference.len() {
        return Err(Error::shape("model and reference lengths differ"));
    }
    Ok(model.iter().zip(reference).map(|(m, p)| (p - m) / tau).collect())
}

/// Seeded initial condition for the coupled system.
pub fn initial_state(cfg: &SystemConfig, seed: u64) -> TwoScaleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slow_dist = Normal::new(0.0, 1.0).expect("std");
    let fast_dist = Normal::new(0.0, 0.1).expect("std");
    TwoScaleState {
        slow: (0..cfg.sites).map(|_| slow_dist.sample(&mut rng)).collect(),
        fast: (0..cfg.sites * cfg.fast_per_site).map(|_| fast_dist.sample(&mut rng)).collect(),
    }
}

/// Reference slow states stored only at window boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub window: usize,
    pub snapshots: Vec<Vec<f64>>,
}

impl Reference {
    pub fn windows(&self) -> usize {
        self.snapshots.len().saturating_sub(1)
    }

    /// Linear interpolation in time inside window `w`; `frac ∈ [0, 1]`.
    pub fn interpolate(&self, w: usize, frac: f64) -> Vec<f64> {
        let (a, b) = (&self.snapshots[w], &self.snapshots[w + 1]);
        a.iter().zip(b).map(|(a, b)| a + (b - a) * frac).collect()
    }
}

/// Spin-up from the seeded initial condition, then `windows` windows of the
/// coupled system, keeping the slow state at each boundary.
pub fn reference_run(cfg: &SystemConfig, seed: u64, windows: usize) -> Result<Reference> {
    cfg.validate()?;
    let mut s = initial_state(cfg, seed);
    for step in 0..cfg.spinup_steps {
        s = step_truth(&s, cfg).map_err(|e| at_step(e, step))?;
    }
    let mut snapshots = Vec::with_capacity(windows + 1);
    snapshots.push(s.slow.clone());
    for w in 0..windows {
        for i in 0..cfg.window {
            let step = cfg.spinup_steps + w * cfg.window + i;
            s = step_truth(&s, cfg).map_err(|e| at_step(e, step))?;
        }
        snapshots.push(s.slow.clone());
    }
    Ok(Reference {
        window: cfg.window,
        snapshots,
    })
}

/// Free run of the biased model, returning states at window boundaries.
pub fn free_run(cfg: &SystemConfig, x0: &[f64], windows: usize) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(windows + 1);
    out.push(x.clone());
    for w in 0..windows {
        for i in 0..cfg.window {
            x = step_free(&x, cfg).map_err(|e| at_step(e, w * cfg.window + i))?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Instantaneous state at a window start and the window-mean nudging
/// tendency over that window, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct NudgingPair {
    pub window: usize,
    pub state: Vec<f64>,
    pub tendency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NudgedRun {
    /// Model state at every window boundary.
    pub boundaries: Vec<Vec<f64>>,
    pub pairs: Vec<NudgingPair>,
    /// Per-step nudging tendency at the start of each step.
    pub step_tendencies: Vec<Vec<f64>>,
}

/// Integrates the biased model with the nudging term inside every RK4 stage,
/// relaxing toward the time-interpolated reference. Starts from the first
/// reference snapshot.
pub fn run_nudged(cfg: &SystemConfig, reference: &Reference, horizon: usize) -> Result<NudgedRun> {
    run_nudged_from(cfg, reference, &reference.snapshots[0], horizon)
}

/// As [`run_nudged`], starting from an arbitrary model state.
pub fn run_nudged_from(cfg: &SystemConfig, reference: &Reference, x0: &[f64], horizon: usize) -> Result<NudgedRun> {
    cfg.validate()?;
    if x0.len() != cfg.sites {
        return Err(Error::shape("initial state does not match the ring"));
    }
    if horizon > reference.windows() {
        return Err(Error::config(format!(
            "horizon of {horizon} windows exceeds the {} stored reference windows",
            reference.windows()
        )));
    }
    if reference.window != cfg.window {
        return Err(Error::config("reference window differs from the system window"));
    }
    let mask = cfg.site_mask();
    let w_steps = cfg.window;
    let mut x = x0.to_vec();
    let mut boundaries = vec![x.clone()];
    let mut pairs = Vec::with_capacity(horizon);
    let mut step_tendencies = Vec::with_capacity(horizon * w_steps);
    for w in 0..horizon {
        let start = x.clone();
        let mut sum = vec![0.0; cfg.sites];
        for i in 0..w_steps {
            let nudge = |x: &[f64], frac: f64| -> Vec<f64> {
                let p = reference.interpolate(w, frac);
                x.iter()
                    .zip(&p)
                    .zip(&mask)
                    .map(|((x, p), m)| m * (p - x) / cfg.tau)
                    .collect()
            };
            let frac0 = i as f64 / w_steps as f64;
            let here = nudge(&x, frac0);
            for (s, t) in sum.iter_mut().zip(&here) {
                *s += t;
            }
            step_tendencies.push(here);
            let dfrac = 1.0 / w_steps as f64;
            x = rk4_step(&x, 0.0, cfg.dt, |y, t| {
                let mut d = free_tendency(y, cfg.forcing);
                for (d, n) in d.iter_mut().zip(nudge(y, frac0 + dfrac * t / cfg.dt)) {
                    *d += n;
                }
                d
            });
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Blowup {
                    step: w * w_steps + i,
                    detail: "non-finite nudged state".into(),
                });
            }
        }
        let tendency = sum.iter().map(|s| s / w_steps as f64).collect();
        pairs.push(NudgingPair {
            window: w,
            state: start,
            tendency,
        });
        boundaries.push(x.clone());
    }
    Ok(NudgedRun {
        boundaries,
        pairs,
        step_tendencies,
    })
}

/// Root-mean-square difference over all sites and snapshots.
pub fn trajectory_rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("trajectories differ in length"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::shape("snapshots differ in size"));
        }
        sum += x.iter().zip(y).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += x.len();
    }
    Ok((sum / n as f64).sqrt())
}

#[cfg(test)]
mod tests;
