//! Eager forward kernels and their adjoints.
//!
//! Every function here works on plain [`Tensor`] values; the tape in
//! [`super::tape`] records which kernel produced a node and calls the matching
//! adjoint during the backward pass.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub fn conv1d_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv1d stride must be positive"));
    }
    if len + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv1d kernel {k} larger than padded length {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Range of output positions `t` whose tap `t*stride + kk - pad` lands inside `[0, len)`.
fn valid_range(len: usize, lout: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kk {
        (pad - kk).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad < kk + 1 {
        0
    } else {
        ((len - 1 + pad - kk) / stride + 1).min(lout)
    };
    (lo, hi.max(lo))
}

fn check_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, cin, len) = x.dims3()?;
    let (cout, cin_w, k) = w.dims3()?;
    if cin != cin_w {
        return Err(Error::shape(format!(
            "conv1d: input has {cin} channels, weight expects {cin_w}"
        )));
    }
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::shape(format!(
                "conv1d: bias has {} entries, expected {cout}",
                b.len()
            )));
        }
    }
    Ok((batch, cin, len, cout, k))
}

/// Cross-correlation: `y[b,o,t] = bias[o] + Σ_{i,k} w[o,i,k] x[b,i,t*stride+k-pad]`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<Tensor> {
    let (batch, cin, len, cout, k) = check_conv(x, w, b)?;
    let lout = conv1d_out_len(len, k, stride, pad)?;
    let mut y = Tensor::zeros([batch, cout, lout]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for bi in 0..batch {
        for co in 0..cout {
            let yrow = &mut yd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            if let Some(b) = b {
                yrow.iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                for kk in 0..k {
                    let wv = wd[(co * cin + ci) * k + kk];
                    match mode {
                        PadMode::Zero => {
                            let (lo, hi) = valid_range(len, lout, kk, stride, pad);
                            if stride == 1 {
                                let off = lo + kk - pad;
                                for (yv, xv) in yrow[lo..hi].iter_mut().zip(&xrow[off..off + hi - lo]) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for t in lo..hi {
                                    yrow[t] += wv * xrow[t * stride + kk - pad];
                                }
                            }
                        }
                        PadMode::Circular => {
                            for (t, yv) in yrow.iter_mut().enumerate() {
                                let idx = (t * stride + kk + len * (pad / len + 1) - pad) % len;
                                *yv += wv * xrow[idx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv1d`] with respect to input, weight and bias.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, cin, len, cout, k) = check_conv(x, w, None)?;
    let lout = gy.dims3()?.2;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros([cout]);
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for bi in 0..batch {
            for co in 0..cout {
                let grow = &gyd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                gb.data_mut()[co] += grow.iter().sum::<f64>();
                for ci in 0..cin {
                    let xoff = (bi * cin + ci) * len;
                    for kk in 0..k {
                        let widx = (co * cin + ci) * k + kk;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        match mode {
                            PadMode::Zero => {
                                let (lo, hi) = valid_range(len, lout, kk, stride, pad);
                                for t in lo..hi {
                                    let idx = xoff + t * stride + kk - pad;
                                    acc += grow[t] * xd[idx];
                                    gxd[idx] += wv * grow[t];
                                }
                            }
                            PadMode::Circular => {
                                for (t, g) in grow.iter().enumerate() {
                                    let idx =
                                        xoff + (t * stride + kk + len * (pad / len + 1) - pad) % len;
                                    acc += g * xd[idx];
                                    gxd[idx] += wv * g;
                                }
                            }
                        }
                        gwd[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Transposed convolution, weight `(in_ch, out_ch, k)`, output length `(L-1)*stride + k`.
pub fn conv_transpose1d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (batch, cin, len) = x.dims3()?;
    let (cin_w, cout, k) = w.dims3()?;
    if cin != cin_w {
        return Err(Error::shape(format!(
            "conv_transpose1d: input has {cin} channels, weight expects {cin_w}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv_transpose1d stride must be positive"));
    }
    if let Some(b) = b {
        if b.len() != cout {
            return Err(Error::shape("conv_transpose1d: bias length mismatch"));
        }
    }
    if len == 0 {
        return Err(Error::shape("conv_transpose1d: empty input"));
    }
    let lout = (len - 1) * stride + k;
    let mut y = Tensor::zeros([batch, cout, lout]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for bi in 0..batch {
        for co in 0..cout {
            let yrow = &mut yd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            if let Some(b) = b {
                yrow.iter_mut().for_each(|v| *v = b.data()[co]);
            }
            for ci in 0..cin {
                let xrow = &xd[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                for kk in 0..k {
                    let wv = wd[(ci * cout + co) * k + kk];
                    for (i, xv) in xrow.iter().enumerate() {
                        yrow[i * stride + kk] += wv * xv;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, cin, len) = x.dims3()?;
    let (_, cout, k) = w.dims3()?;
    let lout = gy.dims3()?.2;
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gw = Tensor::zeros(w.shape().to_vec());
    let mut gb = Tensor::zeros([cout]);
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for bi in 0..batch {
        for co in 0..cout {
            let grow = &gyd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            gb.data_mut()[co] += grow.iter().sum::<f64>();
            for ci in 0..cin {
                let xoff = (bi * cin + ci) * len;
                for kk in 0..k {
                    let widx = (ci * cout + co) * k + kk;
                    let wv = wd[widx];
                    let mut acc = 0.0;
                    for i in 0..len {
                        let g = grow[i * stride + kk];
                        acc += xd[xoff + i] * g;
                        gxd[xoff + i] += wv * g;
                    }
                    gwd[widx] += acc;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Pooling output plus, for max pooling, the flat input index selected per output.
pub struct PoolOut {
    pub y: Tensor,
    pub argmax: Vec<usize>,
}

pub fn pool1d(x: &Tensor, kind: PoolKind, window: usize, stride: usize, pad: usize) -> Result<PoolOut> {
    let (batch, ch, len) = x.dims3()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool1d window and stride must be positive"));
    }
    if pad >= window {
        return Err(Error::shape("pool1d padding must be smaller than the window"));
    }
    if window > len + 2 * pad {
        return Err(Error::shape(format!(
            "pool1d window {window} larger than length {len}"
        )));
    }
    let lout = (len + 2 * pad - window) / stride + 1;
    let mut y = Tensor::zeros([batch, ch, lout]);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(batch * ch * lout);
    }
    let xd = x.data();
    let yd = y.data_mut();
    for row in 0..batch * ch {
        let xrow = &xd[row * len..(row + 1) * len];
        for t in 0..lout {
            let start = (t * stride) as isize - pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + window as isize) as usize).min(len);
            match kind {
                PoolKind::Max => {
                    let mut best = lo;
                    for i in lo + 1..hi {
                        if xrow[i] > xrow[best] {
                            best = i;
                        }
                    }
                    yd[row * lout + t] = xrow[best];
                    argmax.push(row * len + best);
                }
                PoolKind::Avg => {
                    let s: f64 = xrow[lo..hi].iter().sum();
                    yd[row * lout + t] = s / (hi - lo) as f64;
                }
            }
        }
    }
    Ok(PoolOut { y, argmax })
}

pub fn pool1d_backward(
    x_shape: &[usize],
    gy: &Tensor,
    kind: PoolKind,
    window: usize,
    stride: usize,
    pad: usize,
    argmax: &[usize],
) -> Tensor {
    let len = x_shape[2];
    let mut gx = Tensor::zeros(x_shape.to_vec());
    let lout = gy.shape()[2];
    let gxd = gx.data_mut();
    match kind {
        PoolKind::Max => {
            for (g, &idx) in gy.data().iter().zip(argmax) {
                gxd[idx] += g;
            }
        }
        PoolKind::Avg => {
            for (row, grow) in gy.data().chunks(lout).enumerate() {
                for (t, g) in grow.iter().enumerate() {
                    let start = (t * stride) as isize - pad as isize;
                    let lo = start.max(0) as usize;
                    let hi = ((start + window as isize) as usize).min(len);
                    let share = g / (hi - lo) as f64;
                    for v in &mut gxd[row * len + lo..row * len + hi] {
                        *v += share;
                    }
                }
            }
        }
    }
    gx
}

/// Source taps for half-pixel linear interpolation: `(i0, i1, frac)` per output site.
fn interp_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let max = (len - 1) as f64;
    (0..len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_linear1d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (batch, ch, len) = x.dims3()?;
    if factor < 2 {
        return Err(Error::shape("upsample factor must be at least 2"));
    }
    if len == 0 {
        return Err(Error::shape("upsample of empty signal"));
    }
    let taps = interp_taps(len, factor);
    let lout = len * factor;
    let mut y = Tensor::zeros([batch, ch, lout]);
    for (row, yrow) in y.data_mut().chunks_mut(lout).enumerate() {
        let xrow = &x.data()[row * len..(row + 1) * len];
        for (yv, &(i0, i1, f)) in yrow.iter_mut().zip(&taps) {
            *yv = (1.0 - f) * xrow[i0] + f * xrow[i1];
        }
    }
    Ok(y)
}

pub fn upsample_linear1d_adjoint(gy: &Tensor, len: usize, factor: usize) -> Result<Tensor> {
    let (batch, ch, lout) = gy.dims3()?;
    if lout != len * factor {
        return Err(Error::shape("upsample adjoint: length mismatch"));
    }
    let taps = interp_taps(len, factor);
    let mut gx = Tensor::zeros([batch, ch, len]);
    for (row, grow) in gy.data().chunks(lout).enumerate() {
        let gxrow = &mut gx.data_mut()[row * len..(row + 1) * len];
        for (g, &(i0, i1, f)) in grow.iter().zip(&taps) {
            gxrow[i0] += (1.0 - f) * g;
            gxrow[i1] += f * g;
        }
    }
    Ok(gx)
}

/// `(B, C*r, L) -> (B, C, r*L)` with `out[c, r*i + j] = in[c*r + j, i]`.
pub fn pixel_shuffle1d(x: &Tensor, r: usize) -> Result<Tensor> {
    let (batch, ch, len) = x.dims3()?;
    if r == 0 || ch % r != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle1d: {ch} channels not divisible by {r}"
        )));
    }
    let cout = ch / r;
    let mut y = Tensor::zeros([batch, cout, r * len]);
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..batch {
        for c in 0..cout {
            for j in 0..r {
                let src = ((b * ch) + c * r + j) * len;
                for i in 0..len {
                    yd[(b * cout + c) * r * len + r * i + j] = xd[src + i];
                }
            }
        }
    }
    Ok(y)
}

/// Inverse permutation of [`pixel_shuffle1d`].
pub fn pixel_unshuffle1d(y: &Tensor, r: usize) -> Result<Tensor> {
    let (batch, cout, lr) = y.dims3()?;
    if r == 0 || lr % r != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle1d: length {lr} not divisible by {r}"
        )));
    }
    let len = lr / r;
    let ch = cout * r;
    let mut x = Tensor::zeros([batch, ch, len]);
    let yd = y.data();
    let xd = x.data_mut();
    for b in 0..batch {
        for c in 0..cout {
            for j in 0..r {
                let dst = ((b * ch) + c * r + j) * len;
                for i in 0..len {
                    xd[dst + i] = yd[(b * cout + c) * lr + r * i + j];
                }
            }
        }
    }
    Ok(x)
}

/// Keep every `factor`-th site starting at 0.
pub fn subsample1d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (batch, ch, len) = x.dims3()?;
    if factor == 0 || len % factor != 0 {
        return Err(Error::shape(format!(
            "subsample: length {len} not divisible by {factor}"
        )));
    }
    let lout = len / factor;
    let data = x
        .data()
        .chunks(len)
        .flat_map(|row| row.iter().step_by(factor).copied())
        .collect();
    Tensor::new([batch, ch, lout], data)
}

pub fn subsample1d_adjoint(gy: &Tensor, factor: usize) -> Result<Tensor> {
    let (batch, ch, lout) = gy.dims3()?;
    let len = lout * factor;
    let mut gx = Tensor::zeros([batch, ch, len]);
    for (row, grow) in gy.data().chunks(lout).enumerate() {
        for (i, g) in grow.iter().enumerate() {
            gx.data_mut()[row * len + i * factor] = *g;
        }
    }
    Ok(gx)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (batch, _, len) = first.dims3()?;
    let mut total = 0;
    for x in xs {
        let (b, c, l) = x.dims3()?;
        if b != batch || l != len {
            return Err(Error::shape(format!(
                "concat: shape {:?} incompatible with {:?}",
                x.shape(),
                first.shape()
            )));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(batch * total * len);
    for b in 0..batch {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * len..(b + 1) * c * len]);
        }
    }
    Tensor::new([batch, total, len], data)
}

pub fn slice_channels(x: &Tensor, start: usize, count: usize) -> Result<Tensor> {
    let (batch, ch, len) = x.dims3()?;
    if start + count > ch {
        return Err(Error::shape(format!(
            "slice_channels {start}..{} out of {ch}",
            start + count
        )));
    }
    let mut data = Vec::with_capacity(batch * count * len);
    for b in 0..batch {
        let off = (b * ch + start) * len;
        data.extend_from_slice(&x.data()[off..off + count * len]);
    }
    Tensor::new([batch, count, len], data)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse of empty tensors"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}
