//! Parameterized building blocks shared by the FiLM generators and the
//! architectures. Layers hold registry indices into a [`ParameterStore`]; the
//! values live on the tape during a forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tensor::{BatchStats, Mode, PadMode, ParameterStore, Tape, Tensor, Var, BN_EPS};

/// Pointwise nonlinearity used inside conv blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Batch-norm statistics observed during a train-mode forward, keyed by the
/// registry indices of the running buffers.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean_idx: usize,
    pub var_idx: usize,
    pub stats: BatchStats,
}

/// Mutable state threaded through one forward pass.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    pub params: Vec<Var>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    pub norm_updates: Vec<NormUpdate>,
    /// Replace activations by the identity (linearization regime).
    pub linearized: bool,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t mut Tape, params: Vec<Var>, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            tape,
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            norm_updates: Vec::new(),
            linearized: false,
        }
    }

    pub fn p(&self, idx: usize) -> Var {
        self.params[idx]
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        if self.linearized {
            return Ok(x);
        }
        match act {
            Activation::Relu => self.tape.relu(x),
            Activation::Gelu => self.tape.gelu(x),
        }
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the model seed
/// and the parameter name, so adding or removing unrelated parameters never
/// changes the initialization of the others.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn normal_tensor(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// He-normal weights, zero bias.
    Normal,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        init: InitKind,
    ) -> Result<Self> {
        let wname = format!("{name}.w");
        let w = match init {
            InitKind::Normal => normal_tensor(seed, &wname, &[cout, cin, k], (2.0 / (cin * k) as f64).sqrt()),
            InitKind::Zero => Tensor::zeros([cout, cin, k]),
        };
        let w = store.insert(wname, w, true)?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros([cout]), true)?;
        Ok(Self {
            w,
            b,
            stride,
            pad,
            mode,
        })
    }

    /// Same-length convolution with odd kernel `k`.
    pub fn same(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        mode: PadMode,
    ) -> Result<Self> {
        Self::register(store, seed, name, cin, cout, k, 1, k / 2, mode, InitKind::Normal)
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        f.tape.conv1d(x, w, Some(b), self.stride, self.pad, self.mode)
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k + cout
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let wname = format!("{name}.w");
        let w = normal_tensor(seed, &wname, &[cin, cout, k], (2.0 / (cin * k) as f64).sqrt());
        let w = store.insert(wname, w, true)?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros([cout]), true)?;
        Ok(Self { w, b, stride })
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        f.tape.conv_transpose1d(x, w, Some(b), self.stride)
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k + cout
    }
}

/// Batch norm with affine parameters and running-statistics buffers.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl Norm {
    pub fn register(store: &mut ParameterStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full([ch], 1.0), true)?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([ch]), true)?,
            mean: store.insert(format!("{name}.running_mean"), Tensor::zeros([ch]), false)?,
            var: store.insert(format!("{name}.running_var"), Tensor::full([ch], 1.0), false)?,
        })
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let rm = f.tape.value(f.p(self.mean)).data().to_vec();
        let rv = f.tape.value(f.p(self.var)).data().to_vec();
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        let (y, stats) = f.tape.batch_norm(x, g, b, &rm, &rv, f.mode, BN_EPS)?;
        if let Some(stats) = stats {
            f.norm_updates.push(NormUpdate {
                mean_idx: self.mean,
                var_idx: self.var,
                stats,
            });
        }
        Ok(y)
    }

    /// Affine pair plus the two running buffers.
    pub fn param_count(ch: usize) -> usize {
        4 * ch
    }
}

/// Applies running-statistics updates collected during a train-mode forward.
pub fn apply_norm_updates(store: &mut ParameterStore, updates: &[NormUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.value_mut(u.mean_idx).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.value_mut(u.var_idx).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}
