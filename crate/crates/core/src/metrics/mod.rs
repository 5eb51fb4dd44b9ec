//! Pointwise error metrics, structural similarity, correlations, power
//! spectra and autocorrelation-adjusted significance.

use std::fmt::Write as _;

use rustfft::{num_complex::Complex, FftPlanner};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Scalar metrics for one prediction/truth comparison. `None` marks a value
/// that is undefined for the given truth (constant truth for R² and PCC,
/// zero-mean truth for CV).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// `+inf` when the prediction is exact.
    pub psnr: f64,
    pub bias: f64,
    pub std_error: f64,
    pub r2: Option<f64>,
    pub cv: Option<f64>,
    pub ssim: f64,
    pub pcc: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 10] = ["MSE", "RMSE", "MAE", "PSNR", "Bias", "StdError", "R2", "CV", "SSIM", "PCC"];

pub fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), fmt_value)
}

impl MetricTable {
    pub fn values(&self) -> [String; 10] {
        [
            fmt_value(self.mse),
            fmt_value(self.rmse),
            fmt_value(self.mae),
            fmt_value(self.psnr),
            fmt_value(self.bias),
            fmt_value(self.std_error),
            fmt_opt(self.r2),
            fmt_opt(self.cv),
            fmt_value(self.ssim),
            fmt_opt(self.pcc),
        ]
    }

    pub fn csv_header() -> String {
        METRIC_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().join(",")
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::shape("metrics need at least one value"));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} values, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Metrics over flattened values. SSIM treats the input as one signal with
/// a window of `min(7, len)`.
pub fn pointwise_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricTable> {
    metric_table(pred, truth, pred.len())
}

/// Metrics over `rows` of length `row_len` laid end to end; SSIM is the mean
/// over rows.
pub fn metric_table(pred: &[f64], truth: &[f64], row_len: usize) -> Result<MetricTable> {
    check_pair(pred, truth)?;
    if row_len == 0 || pred.len() % row_len != 0 {
        return Err(Error::shape(format!("row length {row_len} does not divide {}", pred.len())));
    }
    let n = pred.len() as f64;
    let errors: Vec<f64> = pred.iter().zip(truth).map(|(p, y)| p - y).collect();
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let rmse = mse.sqrt();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let bias = mean(&errors);
    let std_error = (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    };
    let y_mean = mean(truth);
    let ss_tot: f64 = truth.iter().map(|y| (y - y_mean).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - errors.iter().map(|e| e * e).sum::<f64>() / ss_tot);
    let cv = (y_mean != 0.0).then(|| rmse / y_mean);
    let window = SSIM_WINDOW.min(row_len);
    let mut ssim_sum = 0.0;
    let rows = pred.len() / row_len;
    for r in 0..rows {
        let s = r * row_len..(r + 1) * row_len;
        ssim_sum += ssim(&pred[s.clone()], &truth[s], window)?;
    }
    Ok(MetricTable {
        mse,
        rmse,
        mae,
        psnr,
        bias,
        std_error,
        r2,
        cv,
        ssim: ssim_sum / rows as f64,
        pcc: pearson(pred, truth),
    })
}

/// Default SSIM constants from the joint range of both inputs, with range 1
/// used when both are the same constant.
pub fn ssim_constants(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (lo, hi) = x
        .iter()
        .chain(y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2))
}

pub fn ssim(x: &[f64], y: &[f64], window: usize) -> Result<f64> {
    let (c1, c2) = ssim_constants(x, y);
    ssim_with(x, y, window, c1, c2)
}

/// Mean of local SSIM over every length-`window` sliding window, with
/// population statistics inside each window.
pub fn ssim_with(x: &[f64], y: &[f64], window: usize, c1: f64, c2: f64) -> Result<f64> {
    check_pair(x, y)?;
    if window == 0 || window > x.len() {
        return Err(Error::config(format!(
            "ssim window {window} does not fit a signal of length {}",
            x.len()
        )));
    }
    let w = window as f64;
    let count = x.len() - window + 1;
    let mut total = 0.0;
    for start in 0..count {
        let xs = &x[start..start + window];
        let ys = &y[start..start + window];
        let mx = mean(xs);
        let my = mean(ys);
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in xs.iter().zip(ys) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        let (vx, vy, cxy) = (vx / w, vy / w, cxy / w);
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / count as f64)
}

/// Centered Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation across space.
pub fn pattern_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(a, b).ok_or_else(|| Error::Degenerate("pattern correlation of a constant field".into()))
}

/// Pearson correlation over time for every layer. Rows of `a` and `b` are
/// time steps; columns are layers. Constant layers give `None`.
pub fn temporal_correlation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("temporal correlation needs two equal series of at least two steps"));
    }
    let layers = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != layers) {
        return Err(Error::shape("ragged time series"));
    }
    Ok((0..layers)
        .map(|k| {
            let sa: Vec<f64> = a.iter().map(|r| r[k]).collect();
            let sb: Vec<f64> = b.iter().map(|r| r[k]).collect();
            pearson(&sa, &sb)
        })
        .collect())
}

/// Time-averaged power per integer wavenumber `0..=L/2`.
///
/// The transform is orthonormal (`|û_k|² = |DFT_k|² / L`) and each bin holds
/// the sum over `±k`, so the bins add up to `Σ u²` of a snapshot, that is
/// `L` times its mean square.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
    /// Number of DFT coefficients folded into each bin.
    pub bin_sizes: Vec<usize>,
}

impl SpectrumReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,power,bin_size\n");
        for i in 0..self.power.len() {
            let _ = writeln!(s, "{},{},{}", self.wavenumbers[i], fmt_value(self.power[i]), self.bin_sizes[i]);
        }
        s
    }
}

pub fn power_spectrum(snapshots: &[Vec<f64>]) -> Result<SpectrumReport> {
    let first = snapshots.first().ok_or_else(|| Error::shape("power spectrum of an empty trajectory"))?;
    let len = first.len();
    if len < 4 {
        return Err(Error::shape(format!("power spectrum needs length >= 4, got {len}")));
    }
    if snapshots.iter().any(|s| s.len() != len) {
        return Err(Error::shape("snapshots are not on a common grid"));
    }
    let bins = len / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(len);
    let mut power = vec![0.0; bins];
    let mut sizes = vec![0usize; bins];
    for j in 0..len {
        sizes[j.min(len - j)] += 1;
    }
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for s in snapshots {
        for (b, v) in buf.iter_mut().zip(s) {
            *b = Complex::new(*v, 0.0);
        }
        fft.process(&mut buf);
        for (j, c) in buf.iter().enumerate() {
            power[j.min(len - j)] += c.norm_sqr() / len as f64;
        }
    }
    let t = snapshots.len() as f64;
    power.iter_mut().for_each(|p| *p /= t);
    Ok(SpectrumReport {
        wavenumbers: (0..bins).collect(),
        power,
        bin_sizes: sizes,
    })
}

/// `n (1 − r₁) / (1 + r₁)`, capped to `[2, n]`.
pub fn effective_sample_size(n: usize, r1: f64) -> f64 {
    let n = n as f64;
    (n * (1.0 - r1) / (1.0 + r1)).clamp(2.0f64.min(n), n)
}

pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let m = mean(x);
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    if den == 0.0 {
        return 0.0;
    }
    x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / den
}

/// Two-sided p-value of a zero-mean t-test with the AR(1) effective sample
/// size.
pub fn zero_mean_p_value(series: &[f64]) -> Result<f64> {
    if series.len() < 8 {
        return Err(Error::shape(format!("significance needs at least 8 steps, got {}", series.len())));
    }
    let n = series.len();
    let m = mean(series);
    let var = series.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if m == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate("constant nonzero series has zero variance".into()))
        };
    }
    let n_eff = effective_sample_size(n, lag1_autocorrelation(series));
    let t = m / (var / n_eff).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n_eff - 1.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// `true` where the series' mean differs from zero at level `alpha`.
/// Each entry of `series` is one site's time series.
pub fn significance_mask(series: &[Vec<f64>], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha = {alpha} outside (0, 1)")));
    }
    series.iter().map(|s| Ok(zero_mean_p_value(s)? < alpha)).collect()
}

pub fn mask_csv(mask: &[bool]) -> String {
    mask.iter().map(|m| if *m { "1" } else { "0" }).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests;
