//! Dense 64-bit tensors with a small reverse-mode tape.
//!
//! The operator set is exactly what the corrector architectures need:
//! convolutions, pooling, interpolation, pixel shuffle, batch norm, a few
//! pointwise nonlinearities, channel concat/slice, feature-wise modulation and
//! the MSE loss.

mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use kernels::{
    concat_channels, conv1d, conv_transpose1d, gelu, mse, pixel_shuffle1d, pixel_unshuffle1d, relu,
    subsample1d, upsample_linear1d, PadMode, PoolKind,
};
pub use optim::{adam_step, OptimizerState};
pub use params::{Param, ParameterStore};
pub use tape::{BatchStats, Mode, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Eager pooling without padding.
pub fn pool1d(x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    Ok(kernels::pool1d(x, kind, window, stride, 0)?.y)
}

/// Running normalization statistics with exponential-moving-average updates.
///
/// The running variance tracks the same biased estimate used for the
/// train-mode normalization, so eval mode on a fixed batch converges to the
/// train-mode output.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
