use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, ConvTranspose, Forward, InitKind, Norm};
use crate::tensor::{PadMode, ParameterStore, PoolKind, Var};

/// Two `k=3` convolutions, each followed by batch norm and the activation.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub act: Activation,
}

impl DoubleConv {
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        act: Activation,
        pad: PadMode,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv::same(store, seed, &format!("{name}.conv1"), cin, cout, 3, pad)?,
            norm1: Norm::register(store, &format!("{name}.bn1"), cout)?,
            conv2: Conv::same(store, seed, &format!("{name}.conv2"), cout, cout, 3, pad)?,
            norm2: Norm::register(store, &format!("{name}.bn2"), cout)?,
            act,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        Conv::param_count(cin, cout, 3) + Conv::param_count(cout, cout, 3) + 2 * Norm::param_count(cout)
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv1.apply(f, x)?;
        let y = self.norm1.apply(f, y)?;
        let y = f.activate(y, self.act)?;
        let y = self.conv2.apply(f, y)?;
        let y = self.norm2.apply(f, y)?;
        f.activate(y, self.act)
    }
}

/// Four parallel branches (1x1; 1x1 then k=3; 1x1 then k=5; max-pool then
/// 1x1), concatenated, normalized and activated.
#[derive(Clone, Debug)]
pub struct InceptionBlock {
    pub one: Conv,
    pub three_reduce: Conv,
    pub three: Conv,
    pub five_reduce: Conv,
    pub five: Conv,
    pub pool_proj: Conv,
    pub norm: Norm,
    pub act: Activation,
}

impl InceptionBlock {
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        act: Activation,
        pad: PadMode,
    ) -> Result<Self> {
        if cout == 0 || cout % 4 != 0 {
            return Err(Error::config(format!(
                "inception block `{name}`: {cout} output channels not divisible into 4 branches"
            )));
        }
        let q = cout / 4;
        Ok(Self {
            one: Conv::same(store, seed, &format!("{name}.b1"), cin, q, 1, pad)?,
            three_reduce: Conv::same(store, seed, &format!("{name}.b3r"), cin, q, 1, pad)?,
            three: Conv::same(store, seed, &format!("{name}.b3"), q, q, 3, pad)?,
            five_reduce: Conv::same(store, seed, &format!("{name}.b5r"), cin, q, 1, pad)?,
            five: Conv::same(store, seed, &format!("{name}.b5"), q, q, 5, pad)?,
            pool_proj: Conv::same(store, seed, &format!("{name}.bp"), cin, q, 1, pad)?,
            norm: Norm::register(store, &format!("{name}.bn"), cout)?,
            act,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        let q = cout / 4;
        4 * Conv::param_count(cin, q, 1)
            + Conv::param_count(q, q, 3)
            + Conv::param_count(q, q, 5)
            + Norm::param_count(cout)
    }

    /// The four raw branch outputs before concatenation.
    pub fn branches(&self, f: &mut Forward, x: Var) -> Result<[Var; 4]> {
        let b1 = self.one.apply(f, x)?;
        let r3 = self.three_reduce.apply(f, x)?;
        let b3 = self.three.apply(f, r3)?;
        let r5 = self.five_reduce.apply(f, x)?;
        let b5 = self.five.apply(f, r5)?;
        let pooled = f.tape.pool1d_padded(x, PoolKind::Max, 3, 1, 1)?;
        let bp = self.pool_proj.apply(f, pooled)?;
        Ok([b1, b3, b5, bp])
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let br = self.branches(f, x)?;
        let y = f.tape.concat(&br)?;
        let y = self.norm.apply(f, y)?;
        f.activate(y, self.act)
    }
}

/// Metadata embedding concatenated after each inception stage.
#[derive(Clone, Debug)]
pub struct MetaEmbed {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl MetaEmbed {
    pub fn register(store: &mut ParameterStore, seed: u64, name: &str, meta: usize, width: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv::same(store, seed, &format!("{name}.conv1"), meta, width, 1, PadMode::Zero)?,
            conv2: Conv::same(store, seed, &format!("{name}.conv2"), width, width, 1, PadMode::Zero)?,
        })
    }

    pub fn param_count(meta: usize, width: usize) -> usize {
        Conv::param_count(meta, width, 1) + Conv::param_count(width, width, 1)
    }

    pub fn apply(&self, f: &mut Forward, meta: Var) -> Result<Var> {
        let h = self.conv1.apply(f, meta)?;
        let h = f.tape.relu(h)?;
        self.conv2.apply(f, h)
    }
}

/// Halving block fusing strided conv, max-pool + conv and avg-pool + conv
/// paths by concatenation and a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct DownMultiBlock {
    pub strided: Conv,
    pub max_conv: Conv,
    pub avg_conv: Conv,
    pub fuse: Conv,
    pub norm: Norm,
    pub act: Activation,
}

impl DownMultiBlock {
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        act: Activation,
        pad: PadMode,
    ) -> Result<Self> {
        Ok(Self {
            strided: Conv::register(
                store,
                seed,
                &format!("{name}.strided"),
                cin,
                cout,
                3,
                2,
                1,
                pad,
                InitKind::Normal,
            )?,
            max_conv: Conv::same(store, seed, &format!("{name}.maxconv"), cin, cout, 3, pad)?,
            avg_conv: Conv::same(store, seed, &format!("{name}.avgconv"), cin, cout, 3, pad)?,
            fuse: Conv::same(store, seed, &format!("{name}.fuse"), 3 * cout, cout, 1, pad)?,
            norm: Norm::register(store, &format!("{name}.bn"), cout)?,
            act,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        3 * Conv::param_count(cin, cout, 3) + Conv::param_count(3 * cout, cout, 1) + Norm::param_count(cout)
    }

    pub fn paths(&self, f: &mut Forward, x: Var) -> Result<[Var; 3]> {
        let len = f.tape.value(x).dims3()?.2;
        if len % 2 != 0 {
            return Err(Error::shape(format!("down block needs even length, got {len}")));
        }
        let s = self.strided.apply(f, x)?;
        let mp = f.tape.pool1d(x, PoolKind::Max, 2, 2)?;
        let m = self.max_conv.apply(f, mp)?;
        let ap = f.tape.pool1d(x, PoolKind::Avg, 2, 2)?;
        let a = self.avg_conv.apply(f, ap)?;
        Ok([s, m, a])
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let p = self.paths(f, x)?;
        let y = f.tape.concat(&p)?;
        let y = self.fuse.apply(f, y)?;
        let y = self.norm.apply(f, y)?;
        f.activate(y, self.act)
    }
}

/// Fixed linear interpolation followed by parallel k=3,5,7 convolutions and a
/// 1x1 projection.
#[derive(Clone, Debug)]
pub struct InceptUpsample {
    pub k3: Conv,
    pub k5: Conv,
    pub k7: Conv,
    pub proj: Conv,
}

/// Length-doubling three-branch block: transpose conv, interpolation +
/// multi-kernel convs, and 1x1 expansion + pixel shuffle, fused by a 1x1
/// convolution whose width is at least the input width.
#[derive(Clone, Debug)]
pub struct UpMultiBlock {
    pub transpose: ConvTranspose,
    pub interp: InceptUpsample,
    pub shuffle: Conv,
    pub fuse: Conv,
    pub cin: usize,
    pub branch: usize,
    pub cout: usize,
}

impl UpMultiBlock {
    /// `branch` channels per path; fused output has `cout >= cin` channels.
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        name: &str,
        cin: usize,
        branch: usize,
        cout: usize,
        pad: PadMode,
    ) -> Result<Self> {
        if cout < cin {
            return Err(Error::config(format!(
                "up block `{name}`: fusion width {cout} below input width {cin}"
            )));
        }
        let s = |sfx: &str| format!("{name}.{sfx}");
        Ok(Self {
            transpose: ConvTranspose::register(store, seed, &s("tconv"), cin, branch, 2, 2)?,
            interp: InceptUpsample {
                k3: Conv::same(store, seed, &s("interp.k3"), cin, branch, 3, pad)?,
                k5: Conv::same(store, seed, &s("interp.k5"), cin, branch, 5, pad)?,
                k7: Conv::same(store, seed, &s("interp.k7"), cin, branch, 7, pad)?,
                proj: Conv::same(store, seed, &s("interp.proj"), 3 * branch, branch, 1, pad)?,
            },
            shuffle: Conv::same(store, seed, &s("shuffle"), cin, 2 * branch, 1, pad)?,
            fuse: Conv::same(store, seed, &s("fuse"), 3 * branch, cout, 1, pad)?,
            cin,
            branch,
            cout,
        })
    }

    pub fn param_count(cin: usize, branch: usize, cout: usize) -> usize {
        ConvTranspose::param_count(cin, branch, 2)
            + Conv::param_count(cin, branch, 3)
            + Conv::param_count(cin, branch, 5)
            + Conv::param_count(cin, branch, 7)
            + Conv::param_count(3 * branch, branch, 1)
            + Conv::param_count(cin, 2 * branch, 1)
            + Conv::param_count(3 * branch, cout, 1)
    }

    pub fn branches(&self, f: &mut Forward, x: Var) -> Result<[Var; 3]> {
        let t = self.transpose.apply(f, x)?;
        let up = f.tape.upsample_linear1d(x, 2)?;
        let a = self.interp.k3.apply(f, up)?;
        let b = self.interp.k5.apply(f, up)?;
        let c = self.interp.k7.apply(f, up)?;
        let cat = f.tape.concat(&[a, b, c])?;
        let i = self.interp.proj.apply(f, cat)?;
        let e = self.shuffle.apply(f, x)?;
        let s = f.tape.pixel_shuffle1d(e, 2)?;
        Ok([t, i, s])
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let br = self.branches(f, x)?;
        let cat = f.tape.concat(&br)?;
        self.fuse.apply(f, cat)
    }
}

/// Decoder upsampling operator.
#[derive(Clone, Debug)]
pub enum UpSampler {
    /// Single `k=2, stride=2` transpose convolution.
    Transpose {
        conv: ConvTranspose,
        cin: usize,
        cout: usize,
    },
    Multi(UpMultiBlock),
}

impl UpSampler {
    pub fn transpose(store: &mut ParameterStore, seed: u64, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(UpSampler::Transpose {
            conv: ConvTranspose::register(store, seed, name, cin, cout, 2, 2)?,
            cin,
            cout,
        })
    }

    pub fn in_channels(&self) -> usize {
        match self {
            UpSampler::Transpose { cin, .. } => *cin,
            UpSampler::Multi(m) => m.cin,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            UpSampler::Transpose { cout, .. } => *cout,
            UpSampler::Multi(m) => m.cout,
        }
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        match self {
            UpSampler::Transpose { conv, .. } => conv.apply(f, x),
            UpSampler::Multi(m) => m.apply(f, x),
        }
    }
}
