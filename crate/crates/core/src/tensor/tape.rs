//! Reverse-mode tape over the operator set used by the architectures.

use rand::Rng;

use super::kernels::{self, PadMode, PoolKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        pad: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Subsample {
        x: Var,
        factor: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Gelu(Var),
    Elu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Affine {
        x: Var,
        a: f64,
    },
    Add(Var, Var),
    Film {
        x: Var,
        gamma_hat: Var,
        beta: Var,
    },
    ChannelMean(Var),
    WeightedMse {
        pred: Var,
        target: Var,
        weights: Option<Vec<f64>>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Per-channel statistics observed by a train-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let y = kernels::conv1d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            mode,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            y,
            &inputs,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
            },
            "conv1d",
        )
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = kernels::conv_transpose1d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, &inputs, Op::ConvT1d { x, w, b, stride }, "conv_transpose1d")
    }

    pub fn pool1d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        self.pool1d_padded(x, kind, window, stride, 0)
    }

    pub fn pool1d_padded(
        &mut self,
        x: Var,
        kind: PoolKind,
        window: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::pool1d(self.value(x), kind, window, stride, pad)?;
        self.push(
            out.y,
            &[x],
            Op::Pool {
                x,
                kind,
                window,
                stride,
                pad,
                argmax: out.argmax,
            },
            "pool1d",
        )
    }

    pub fn upsample_linear1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::upsample_linear1d(self.value(x), factor)?;
        self.push(y, &[x], Op::Upsample { x, factor }, "upsample_linear1d")
    }

    pub fn subsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::subsample1d(self.value(x), factor)?;
        self.push(y, &[x], Op::Subsample { x, factor }, "subsample1d")
    }

    pub fn pixel_shuffle1d(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = kernels::pixel_shuffle1d(self.value(x), r)?;
        self.push(y, &[x], Op::PixelShuffle { x, r }, "pixel_shuffle1d")
    }

    /// Train mode normalizes with batch statistics (returned for running-stat
    /// updates); eval mode uses the supplied running mean and variance.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (batch, ch, len) = self.value(x).dims3()?;
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(Error::shape("batch_norm: affine parameters do not match channels"));
        }
        let n = batch * len;
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::shape(
                        "batch_norm: train mode needs more than one element per channel",
                    ));
                }
                let xd = self.value(x).data();
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xd[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        ss += xd[(b * ch + c) * len..(b * ch + c + 1) * len]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = ss / n as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        if mean.len() != ch || var.len() != ch {
            return Err(Error::shape("batch_norm: running statistics do not match channels"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for i in off..off + len {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    y[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let y = Tensor::new([batch, ch, len], y)?;
        let stats = (mode == Mode::Train).then(|| BatchStats { mean, var });
        let v = self.push(
            y,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::relu(self.value(x));
        self.push(y, &[x], Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = kernels::gelu(self.value(x));
        self.push(y, &[x], Op::Gelu(x), "gelu")
    }

    /// `x` for `x >= 0`, `exp(x) - 1` otherwise; output is always above -1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| if a >= 0.0 { a } else { a.exp_m1() })
            .collect();
        let y = Tensor::new(v.shape().to_vec(), data)?;
        self.push(y, &[x], Op::Elu(x), "elu")
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` so eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(v.shape().to_vec(), data)?;
        self.push(y, &[x], Op::Dropout { x, mask }, "dropout")
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let y = kernels::concat_channels(&vals)?;
        self.push(y, xs, Op::Concat(xs.to_vec()), "concat")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let y = kernels::slice_channels(self.value(x), start, count)?;
        self.push(y, &[x], Op::Slice { x, start }, "slice_channels")
    }

    /// `a * x + b` with scalar `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|t| a * t + b).collect();
        let y = Tensor::new(v.shape().to_vec(), data)?;
        self.push(y, &[x], Op::Affine { x, a }, "affine")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        self.push(y, &[a, b], Op::Add(a, b), "add")
    }

    /// Feature-wise modulation `(1 + gamma_hat) * x + beta`, with `gamma_hat`
    /// and `beta` of shape `(B, C, 1)` broadcast along the length axis.
    pub fn film(&mut self, x: Var, gamma_hat: Var, beta: Var) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        for p in [gamma_hat, beta] {
            if self.value(p).shape() != [batch, ch, 1] {
                return Err(Error::shape(format!(
                    "film: modulation shape {:?}, expected {:?}",
                    self.value(p).shape(),
                    [batch, ch, 1]
                )));
            }
        }
        let xd = self.value(x).data();
        let g = self.value(gamma_hat).data();
        let bt = self.value(beta).data();
        let mut y = vec![0.0; xd.len()];
        for r in 0..batch * ch {
            let scale = 1.0 + g[r];
            for i in r * len..(r + 1) * len {
                y[i] = scale * xd[i] + bt[r];
            }
        }
        let y = Tensor::new([batch, ch, len], y)?;
        self.push(y, &[x, gamma_hat, beta], Op::Film { x, gamma_hat, beta }, "film")
    }

    /// `(B, C, L) -> (B, C, 1)` average over the length axis.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (batch, ch, len) = self.value(x).dims3()?;
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|r| r.iter().sum::<f64>() / len as f64)
            .collect();
        let y = Tensor::new([batch, ch, 1], data)?;
        self.push(y, &[x], Op::ChannelMean(x), "channel_mean")
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.weighted_mse(pred, target, None)
    }

    /// `Σ w (pred - target)² / Σ w`; plain mean when `weights` is `None`.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: Option<&Tensor>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(format!("mse: {:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let (loss, norm, w) = match weights {
            None => {
                let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                (s / p.len() as f64, p.len() as f64, None)
            }
            Some(w) => {
                if w.shape() != p.shape() {
                    return Err(Error::shape("mse: weight shape mismatch"));
                }
                let norm: f64 = w.data().iter().sum();
                if norm <= 0.0 {
                    return Err(Error::Degenerate("mse weights sum to zero".into()));
                }
                let s: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(w.data())
                    .map(|((a, b), w)| w * (a - b) * (a - b))
                    .sum();
                (s / norm, norm, Some(w.data().to_vec()))
            }
        };
        let y = Tensor::new([1], vec![loss])?;
        self.push(
            y,
            &[pred, target],
            Op::WeightedMse {
                pred,
                target,
                weights: w,
                norm,
            },
            "mse",
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep seeded with `d root / d root = 1`. `root` must be a scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(shape, 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.clone() else {
                continue;
            };
            if !gy.is_finite() {
                return Err(Error::NonFinite("backward pass".into()));
            }
            self.backprop_node(idx, &gy)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, gy: &Tensor) -> Result<()> {
        // Split borrow: take the op out temporarily so we can read inputs.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let res = self.backprop_op(&op, gy);
        self.nodes[idx].op = op;
        res
    }

    fn backprop_op(&mut self, op: &Op, gy: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            &Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                mode,
            } => {
                let (gx, gw, gb) =
                    kernels::conv1d_backward(self.value(x), self.value(w), gy, stride, pad, mode)?;
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                if let Some(b) = b {
                    self.accumulate(b, gb);
                }
            }
            &Op::ConvT1d { x, w, b, stride } => {
                let (gx, gw, gb) =
                    kernels::conv_transpose1d_backward(self.value(x), self.value(w), gy, stride)?;
                self.accumulate(x, gx);
                self.accumulate(w, gw);
                if let Some(b) = b {
                    self.accumulate(b, gb);
                }
            }
            Op::Pool {
                x,
                kind,
                window,
                stride,
                pad,
                argmax,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let gx = kernels::pool1d_backward(&shape, gy, *kind, *window, *stride, *pad, argmax);
                self.accumulate(*x, gx);
            }
            &Op::Upsample { x, factor } => {
                let len = self.value(x).shape()[2];
                let gx = kernels::upsample_linear1d_adjoint(gy, len, factor)?;
                self.accumulate(x, gx);
            }
            &Op::Subsample { x, factor } => {
                let gx = kernels::subsample1d_adjoint(gy, factor)?;
                self.accumulate(x, gx);
            }
            &Op::PixelShuffle { x, r } => {
                let gx = kernels::pixel_unshuffle1d(gy, r)?;
                self.accumulate(x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (batch, ch, len) = gy.dims3()?;
                let n = (batch * len) as f64;
                let g = self.value(*gamma).data().to_vec();
                let gyd = gy.data();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * len;
                        for i in off..off + len {
                            sum_g[c] += gyd[i];
                            sum_gx[c] += gyd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; gyd.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let off = (b * ch + c) * len;
                            for i in off..off + len {
                                gx[i] = if *train {
                                    g[c] * inv_std[c] / n * (n * gyd[i] - sum_g[c] - xhat[i] * sum_gx[c])
                                } else {
                                    g[c] * inv_std[c] * gyd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::new([batch, ch, len], gx)?);
                }
                self.accumulate(*gamma, Tensor::new([ch], sum_gx)?);
                self.accumulate(*beta, Tensor::new([ch], sum_g)?);
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(a, g)| if *a > 0.0 { *g } else { 0.0 })
                    .collect();
                let gx = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, gx);
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(a, g)| g * kernels::gelu_grad_scalar(*a))
                    .collect();
                let gx = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, gx);
            }
            &Op::Elu(x) => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(a, g)| if *a >= 0.0 { *g } else { g * a.exp() })
                    .collect();
                let gx = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, gx);
            }
            Op::Dropout { x, mask } => {
                let data = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                let gx = Tensor::new(gy.shape().to_vec(), data)?;
                self.accumulate(*x, gx);
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if self.needs(x) {
                        let gx = kernels::slice_channels(gy, start, c)?;
                        self.accumulate(x, gx);
                    }
                    start += c;
                }
            }
            &Op::Slice { x, start } => {
                let (batch, ch, len) = self.value(x).dims3()?;
                let count = gy.shape()[1];
                let mut gx = Tensor::zeros([batch, ch, len]);
                for b in 0..batch {
                    let dst = (b * ch + start) * len;
                    let src = b * count * len;
                    gx.data_mut()[dst..dst + count * len]
                        .copy_from_slice(&gy.data()[src..src + count * len]);
                }
                self.accumulate(x, gx);
            }
            &Op::Affine { x, a } => {
                let data = gy.data().iter().map(|g| a * g).collect();
                let gx = Tensor::new(gy.shape().to_vec(), data)?;
                self.accumulate(x, gx);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gy.clone());
                self.accumulate(b, gy.clone());
            }
            &Op::Film { x, gamma_hat, beta } => {
                let (batch, ch, len) = gy.dims3()?;
                let xd = self.value(x).data();
                let g = self.value(gamma_hat).data();
                let gyd = gy.data();
                let mut gx = vec![0.0; gyd.len()];
                let mut gg = vec![0.0; batch * ch];
                let mut gb = vec![0.0; batch * ch];
                for r in 0..batch * ch {
                    let scale = 1.0 + g[r];
                    for i in r * len..(r + 1) * len {
                        gx[i] = scale * gyd[i];
                        gg[r] += gyd[i] * xd[i];
                        gb[r] += gyd[i];
                    }
                }
                self.accumulate(x, Tensor::new([batch, ch, len], gx)?);
                self.accumulate(gamma_hat, Tensor::new([batch, ch, 1], gg)?);
                self.accumulate(beta, Tensor::new([batch, ch, 1], gb)?);
            }
            &Op::ChannelMean(x) => {
                let (batch, ch, len) = self.value(x).dims3()?;
                let mut gx = Vec::with_capacity(batch * ch * len);
                for g in gy.data() {
                    gx.extend(std::iter::repeat(g / len as f64).take(len));
                }
                self.accumulate(x, Tensor::new([batch, ch, len], gx)?);
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
                norm,
            } => {
                let seed = gy.data()[0];
                let p = self.value(*pred);
                let t = self.value(*target);
                let diff: Vec<f64> = match weights {
                    None => p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| seed * 2.0 * (a - b) / norm)
                        .collect(),
                    Some(w) => p
                        .data()
                        .iter()
                        .zip(t.data())
                        .zip(w)
                        .map(|((a, b), w)| seed * 2.0 * w * (a - b) / norm)
                        .collect(),
                };
                let shape = p.shape().to_vec();
                let neg = diff.iter().map(|d| -d).collect();
                self.accumulate(*pred, Tensor::new(shape.clone(), diff)?);
                self.accumulate(*target, Tensor::new(shape, neg)?);
            }
        }
        Ok(())
    }
}
