use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{evaluate_predictions, EvalReport};
use crate::error::{Error, Result};
use crate::toyclimate::Dataset;

/// Half-width of the input stencil.
pub const RIDGE_RADIUS: usize = 2;

/// One linear stencil map per output channel, shared by all sites: the
/// normalized inputs at offsets `-r..=r` of every channel plus an intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub radius: usize,
    pub lambda: f64,
    pub channels: usize,
    pub length: usize,
    /// Per output channel, `channels · (2r + 1)` stencil weights then the
    /// intercept.
    pub weights: Vec<Vec<f64>>,
}

fn features(state: &[f64], channels: usize, len: usize, radius: usize, site: usize, out: &mut Vec<f64>) {
    out.clear();
    for c in 0..channels {
        let row = &state[c * len..(c + 1) * len];
        for o in 0..=2 * radius {
            out.push(row[(site + len + o - radius) % len]);
        }
    }
    out.push(1.0);
}

impl RidgeModel {
    /// Normalized tendency for a normalized `(C·L)` state.
    pub fn predict(&self, state: &[f64]) -> Vec<f64> {
        let (c, l) = (self.channels, self.length);
        let mut out = vec![0.0; c * l];
        let mut f = Vec::new();
        for k in 0..l {
            features(state, c, l, self.radius, k, &mut f);
            for (oc, w) in self.weights.iter().enumerate() {
                out[oc * l + k] = w.iter().zip(&f).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

/// Closed-form ridge fit on the training split. The intercept is not
/// penalized, so a huge `lambda` predicts the training mean.
pub fn fit_ridge(train: &Dataset, lambda: f64) -> Result<RidgeModel> {
    if train.is_empty() {
        return Err(Error::config("ridge baseline needs a nonempty training split"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("ridge lambda = {lambda} must be finite and non-negative")));
    }
    let (c, l, r) = (train.channels.len(), train.length, RIDGE_RADIUS);
    if l < 2 * r + 1 {
        return Err(Error::shape("ring shorter than the ridge stencil"));
    }
    let p = c * (2 * r + 1) + 1;
    let mask = train.site_weights();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = vec![DVector::<f64>::zeros(p); c];
    let mut f = Vec::with_capacity(p);
    for s in &train.samples {
        for k in 0..l {
            if mask.as_ref().is_some_and(|m| m[k] == 0.0) {
                continue;
            }
            features(&s.state, c, l, r, k, &mut f);
            for i in 0..p {
                for j in 0..p {
                    gram[(i, j)] += f[i] * f[j];
                }
                for (oc, b) in rhs.iter_mut().enumerate() {
                    b[i] += f[i] * s.tendency[oc * l + k];
                }
            }
        }
    }
    for i in 0..p - 1 {
        gram[(i, i)] += lambda;
    }
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if !(lo > 1e-12 * hi) {
        return Err(Error::Degenerate(format!(
            "singular ridge normal equations (smallest eigenvalue {lo:e}, largest {hi:e})"
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge normal equations are not positive definite".into()))?;
    let weights = rhs.iter().map(|b| chol.solve(b).iter().copied().collect()).collect();
    Ok(RidgeModel {
        radius: r,
        lambda,
        channels: c,
        length: l,
        weights,
    })
}

/// Fits on `train` and evaluates on `test`.
pub fn baseline_ridge(train: &Dataset, test: &Dataset, lambda: f64) -> Result<(RidgeModel, EvalReport)> {
    crate::toyclimate::check_disjoint_epochs(&train.epochs, &test.epochs)?;
    let model = fit_ridge(train, lambda)?;
    let preds: Vec<Vec<f64>> = test.samples.iter().map(|s| model.predict(&s.state)).collect();
    let report = evaluate_predictions(test, &preds)?;
    Ok((model, report))
}
