//! Supervised training of the correctors on nudging pairs, offline
//! evaluation and a closed-form ridge baseline.

mod ridge;

pub use ridge::{baseline_ridge, fit_ridge, RidgeModel, RIDGE_RADIUS};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archs::ModelGraph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::apply_norm_updates;
use crate::metrics::{self, fmt_opt, fmt_value, MetricTable, SpectrumReport};
use crate::tensor::{adam_step, Mode, OptimizerState, Tape, Tensor};
use crate::toyclimate::{check_disjoint_epochs, Dataset, Quantity};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds the shuffling order and dropout masks.
    pub seed: u64,
    /// Stop when the epoch loss has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Keep a checkpoint every this many epochs; 0 keeps none.
    pub checkpoint_every: usize,
    pub norm_momentum: f64,
    pub schedule: LrSchedule,
}

/// Learning-rate schedule over the planned number of updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero.
    Cosine,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LrSchedule::Constant, LrSchedule::Cosine].into_iter().find(|v| v.as_str() == s)
    }

    /// Rate for update `step` of `total`.
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 1e-5,
            seed: 0,
            patience: None,
            checkpoint_every: 0,
            norm_momentum: 0.1,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            problems.push(format!("norm_momentum = {} outside [0, 1]", self.norm_momentum));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub epoch: usize,
    /// Mean train-mode batch loss over the epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Checkpoints kept at the configured cadence.
    pub snapshots: Vec<Checkpoint>,
    pub loss_curve: Vec<LossPoint>,
    /// Eval-mode loss over the whole training split before the first update.
    pub initial_loss: f64,
    /// Eval-mode loss over the whole training split after training.
    pub final_loss: f64,
    pub updates: usize,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss\n");
        for p in &self.loss_curve {
            let _ = writeln!(s, "{},{}", p.epoch, fmt_value(p.train_loss));
        }
        s
    }
}

fn loss_weights(data: &Dataset, batch: usize) -> Option<Tensor> {
    let mask = data.site_weights()?;
    let c = data.channels.len();
    let w: Vec<f64> = (0..batch * c).flat_map(|_| mask.iter().copied()).collect();
    Tensor::new([batch, c, data.length], w).ok()
}

fn check_compatible(model: &ModelGraph, data: &Dataset) -> Result<()> {
    let cfg = &model.config;
    if cfg.channels != data.channels.len() || cfg.meta_channels != data.meta_channels.len() || cfg.length != data.length {
        return Err(Error::shape(format!(
            "model expects ({} channels, {} metadata, length {}), dataset has ({}, {}, {})",
            cfg.channels,
            cfg.meta_channels,
            cfg.length,
            data.channels.len(),
            data.meta_channels.len(),
            data.length
        )));
    }
    if let Some(d) = &model.normalization_digest {
        if *d != data.stats.digest() {
            return Err(Error::Digest {
                expected: d.clone(),
                found: data.stats.digest(),
            });
        }
    }
    if data.is_empty() {
        return Err(Error::config("dataset has no samples"));
    }
    Ok(())
}

/// Normalized eval-mode predictions for every sample.
pub fn predict_dataset(model: &ModelGraph, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let n = data.len();
    let per = data.channels.len() * data.length;
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (s, _, m) = data.batch(chunk)?;
        let y = model.predict(&s, &m)?;
        out.extend(y.data().chunks(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Eval-mode masked MSE over the whole dataset.
pub fn dataset_loss(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    let preds = predict_dataset(model, data, 64)?;
    let mask = data.site_weights();
    let l = data.length;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, s) in preds.iter().zip(&data.samples) {
        for (i, (a, b)) in p.iter().zip(&s.tendency).enumerate() {
            let w = mask.as_ref().map_or(1.0, |m| m[i % l]);
            num += w * (a - b) * (a - b);
            den += w;
        }
    }
    Ok(num / den)
}

fn dropout_seed(seed: u64, update: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (update as u64).wrapping_add(1)
}

/// Minibatch AdamW on masked MSE. Deterministic given the seed; the
/// shuffling order depends only on the seed and the dataset size, so models
/// trained with the same config see identical sample streams.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model, data)?;
    model.normalization_digest = Some(data.stats.digest());
    let initial_loss = dataset_loss(model, data)?;
    let mut opt = OptimizerState::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut last_good = Checkpoint::from_model(model, data, 0);
    let mut updates = 0usize;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    let planned = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (s, t, m) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let (out, params, norm) = model.forward(&mut tape, &s, &m, Mode::Train, dropout_seed(cfg.seed, updates))?;
            let target = tape.constant(t);
            let weights = loss_weights(data, chunk.len());
            let loss = match tape.weighted_mse(out.output, target, weights.as_ref()) {
                Ok(l) if tape.value(l).data()[0].is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        step: updates,
                        detail: format!("non-finite loss in epoch {epoch}"),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).data()[0];
            tape.backward(loss)?;
            let grads = model.store.collect_grads(&mut tape, &params);
            opt.lr = cfg.schedule.rate(cfg.lr, updates, planned);
            adam_step(&mut model.store, &grads, &mut opt)?;
            apply_norm_updates(&mut model.store, &norm, cfg.norm_momentum);
            updates += 1;
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        curve.push(LossPoint { epoch, train_loss: mean });
        epochs_run = epoch;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            last_good = Checkpoint::from_model(model, data, epoch);
            snapshots.push(last_good.clone());
        }
        if mean < best {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let final_loss = dataset_loss(model, data)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: updates,
            detail: format!("final loss {final_loss}"),
            last_good: Box::new(last_good),
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(model, data, epochs_run),
        snapshots,
        loss_curve: curve,
        initial_loss,
        final_loss,
        updates,
    })
}

/// Offline skill on a held-out split, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub channels: Vec<String>,
    pub samples: usize,
    /// One metric table per channel.
    pub tables: Vec<MetricTable>,
    /// Pattern correlation of the time-mean predicted and true fields.
    pub time_mean_pcc: Vec<Option<f64>>,
    /// Per channel, the correlation over samples at every site.
    pub tcc: Vec<Vec<Option<f64>>>,
    pub truth_spectra: Vec<SpectrumReport>,
    pub pred_spectra: Vec<SpectrumReport>,
}

impl EvalReport {
    pub fn table(&self, channel: &str) -> Option<&MetricTable> {
        self.channels.iter().position(|c| c == channel).map(|i| &self.tables[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("channel,{},PCC_time_mean\n", MetricTable::csv_header());
        for (i, c) in self.channels.iter().enumerate() {
            let _ = writeln!(s, "{c},{},{}", self.tables[i].csv_row(), fmt_opt(self.time_mean_pcc[i]));
        }
        s
    }

    pub fn tcc_csv(&self) -> String {
        let mut s = String::from("channel,site,tcc\n");
        for (i, c) in self.channels.iter().enumerate() {
            for (k, v) in self.tcc[i].iter().enumerate() {
                let _ = writeln!(s, "{c},{k},{}", fmt_opt(*v));
            }
        }
        s
    }

    pub fn spectra_csv(&self) -> String {
        let mut s = String::from("channel,k,truth,prediction\n");
        for (i, c) in self.channels.iter().enumerate() {
            let (t, p) = (&self.truth_spectra[i], &self.pred_spectra[i]);
            for k in 0..t.power.len() {
                let _ = writeln!(s, "{c},{k},{},{}", fmt_value(t.power[k]), fmt_value(p.power[k]));
            }
        }
        s
    }
}

/// Metrics for normalized predictions aligned with `data.samples`. Masked
/// sites are zeroed in the prediction, matching the archived tendencies.
pub fn evaluate_predictions(data: &Dataset, preds: &[Vec<f64>]) -> Result<EvalReport> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(Error::shape("predictions do not match the dataset"));
    }
    let l = data.length;
    let mask = data.site_weights();
    let mut tables = Vec::new();
    let mut pccs = Vec::new();
    let mut tccs = Vec::new();
    let mut truth_spectra = Vec::new();
    let mut pred_spectra = Vec::new();
    for (c, _) in data.channels.iter().enumerate() {
        let mut truth_rows = Vec::with_capacity(data.len());
        let mut pred_rows = Vec::with_capacity(data.len());
        for (p, s) in preds.iter().zip(&data.samples) {
            let phys_t = data.stats.denormalize_values(Quantity::Tendency, &s.tendency);
            let mut phys_p = data.stats.denormalize_values(Quantity::Tendency, p);
            if let Some(m) = &mask {
                for (i, v) in phys_p.iter_mut().enumerate() {
                    *v *= m[i % l];
                }
            }
            truth_rows.push(phys_t[c * l..(c + 1) * l].to_vec());
            pred_rows.push(phys_p[c * l..(c + 1) * l].to_vec());
        }
        let flat_t: Vec<f64> = truth_rows.concat();
        let flat_p: Vec<f64> = pred_rows.concat();
        tables.push(metrics::metric_table(&flat_p, &flat_t, l)?);
        let n = data.len() as f64;
        let mean_t: Vec<f64> = (0..l).map(|k| truth_rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let mean_p: Vec<f64> = (0..l).map(|k| pred_rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        pccs.push(metrics::pearson(&mean_p, &mean_t));
        tccs.push(if data.len() >= 2 {
            metrics::temporal_correlation(&pred_rows, &truth_rows)?
        } else {
            vec![None; l]
        });
        truth_spectra.push(metrics::power_spectrum(&truth_rows)?);
        pred_spectra.push(metrics::power_spectrum(&pred_rows)?);
    }
    Ok(EvalReport {
        channels: data.channels.clone(),
        samples: data.len(),
        tables,
        time_mean_pcc: pccs,
        tcc: tccs,
        truth_spectra,
        pred_spectra,
    })
}

/// Evaluates a checkpoint on a test split that shares its normalization and
/// none of its simulation epochs.
pub fn evaluate_offline(checkpoint: &Checkpoint, test: &Dataset) -> Result<EvalReport> {
    check_disjoint_epochs(&checkpoint.train_epochs, &test.epochs)?;
    if checkpoint.stats.digest() != test.stats.digest() {
        return Err(Error::Digest {
            expected: checkpoint.stats.digest(),
            found: test.stats.digest(),
        });
    }
    let model = checkpoint.to_model()?;
    check_compatible(&model, test)?;
    let preds = predict_dataset(&model, test, 64)?;
    evaluate_predictions(test, &preds)
}
