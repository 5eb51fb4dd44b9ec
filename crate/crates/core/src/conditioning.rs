//! Metadata conditioning: static per-site context and the feature-wise
//! modulation generators that turn it into per-level affine parameters.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::{Conv, Forward, InitKind};
use crate::tensor::{kernels, PadMode, ParameterStore, PoolKind, Tape, Tensor, Var};

/// Metadata channel names, in file-header order.
pub const METADATA_CHANNELS: [&str; 4] = ["pos_sin", "pos_cos", "forcing", "mask"];

/// Static context for one sample: `(1, M, L)` values plus channel names.
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataVector {
    pub names: Vec<String>,
    pub values: Tensor,
}

impl MetadataVector {
    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        let c = self.names.iter().position(|n| n == name)?;
        Some(self.values.row(0, c))
    }

    pub fn resample(&self, target_len: usize) -> Result<MetadataVector> {
        Ok(MetadataVector {
            names: self.names.clone(),
            values: resample(&self.values, target_len)?,
        })
    }
}

/// Position encodings on the ring, the external forcing value and the static
/// site mask (1 = active, 0 = excluded).
pub fn build_metadata(forcing: f64, grid_len: usize, mask: &[f64]) -> Result<MetadataVector> {
    if grid_len < 4 {
        return Err(Error::config(format!("metadata needs grid length >= 4, got {grid_len}")));
    }
    if mask.len() != grid_len {
        return Err(Error::shape(format!(
            "mask has {} sites, grid has {grid_len}",
            mask.len()
        )));
    }
    if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
        return Err(Error::config("metadata mask must be binary"));
    }
    if !forcing.is_finite() {
        return Err(Error::NonFinite("metadata forcing".into()));
    }
    let l = grid_len as f64;
    let mut data = Vec::with_capacity(4 * grid_len);
    data.extend((0..grid_len).map(|s| (2.0 * PI * s as f64 / l).sin()));
    data.extend((0..grid_len).map(|s| (2.0 * PI * s as f64 / l).cos()));
    data.extend(std::iter::repeat(forcing).take(grid_len));
    data.extend_from_slice(mask);
    Ok(MetadataVector {
        names: METADATA_CHANNELS.iter().map(|s| s.to_string()).collect(),
        values: Tensor::new([1, 4, grid_len], data)?,
    })
}

/// Resample a `(B, C, L)` tensor to `target_len`: linear interpolation when
/// growing by an integer factor, block averaging when shrinking by one.
pub fn resample(x: &Tensor, target_len: usize) -> Result<Tensor> {
    let len = x.dims3()?.2;
    if target_len == len {
        Ok(x.clone())
    } else if target_len > len && target_len % len == 0 {
        kernels::upsample_linear1d(x, target_len / len)
    } else if target_len < len && target_len > 0 && len % target_len == 0 {
        let f = len / target_len;
        Ok(kernels::pool1d(x, PoolKind::Avg, f, f, 0)?.y)
    } else {
        Err(Error::shape(format!(
            "cannot resample length {len} to {target_len} by an integer factor"
        )))
    }
}

/// Per-channel modulation for one path at one level: `gamma_hat` and `beta`
/// of shape `(B, C, 1)`. The effective scale is `1 + gamma_hat > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    pub gamma_hat: Tensor,
    pub beta: Tensor,
}

/// `(1 + gamma_hat) * F + beta`, broadcast along the length axis.
pub fn film_apply(features: &Tensor, p: &FilmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let g = tape.constant(p.gamma_hat.clone());
    let b = tape.constant(p.beta.clone());
    let y = tape.film(x, g, b)?;
    Ok(tape.value(y).clone())
}

/// Inverse of [`film_apply`] for the same parameters.
pub fn film_invert(y: &Tensor, p: &FilmParams) -> Result<Tensor> {
    let (batch, ch, len) = y.dims3()?;
    if p.gamma_hat.shape() != [batch, ch, 1] || p.beta.shape() != [batch, ch, 1] {
        return Err(Error::shape("film_invert: parameter shape mismatch"));
    }
    let mut out = y.clone();
    for (r, row) in out.data_mut().chunks_mut(len).enumerate() {
        let (g, b) = (p.gamma_hat.data()[r], p.beta.data()[r]);
        row.iter_mut().for_each(|v| *v = (*v - b) / (1.0 + g));
    }
    Ok(out)
}

/// Per-level modulation generator: two 1x1 convolutions over the metadata
/// resampled to the level length, then a global average per output channel.
/// The raw scale passes through an ELU so `1 + gamma_hat` stays positive, and
/// the second convolution starts at zero so a fresh generator is the identity.
#[derive(Clone, Debug)]
pub struct FilmGenerator {
    pub level: usize,
    pub channels: usize,
    pub paths: usize,
    pub hidden: Conv,
    pub head: Conv,
    head_name: String,
}

impl FilmGenerator {
    pub fn register(
        store: &mut ParameterStore,
        seed: u64,
        level: usize,
        meta_channels: usize,
        hidden: usize,
        channels: usize,
        paths: usize,
    ) -> Result<Self> {
        let base = format!("film.{level}");
        let hidden_conv = Conv::register(
            store,
            seed,
            &format!("{base}.embed"),
            meta_channels,
            hidden,
            1,
            1,
            0,
            PadMode::Zero,
            InitKind::Normal,
        )?;
        let head_name = format!("{base}.head");
        let head = Conv::register(
            store,
            seed,
            &head_name,
            hidden,
            2 * channels * paths,
            1,
            1,
            0,
            PadMode::Zero,
            InitKind::Zero,
        )?;
        Ok(Self {
            level,
            channels,
            paths,
            hidden: hidden_conv,
            head,
            head_name,
        })
    }

    pub fn param_count(meta_channels: usize, hidden: usize, channels: usize, paths: usize) -> usize {
        Conv::param_count(meta_channels, hidden, 1) + Conv::param_count(hidden, 2 * channels * paths, 1)
    }

    pub fn head_prefix(&self) -> &str {
        &self.head_name
    }

    /// `(gamma_hat, beta)` per path from metadata already at this level's length.
    pub fn forward(&self, f: &mut Forward, meta: Var) -> Result<Vec<(Var, Var)>> {
        let h = self.hidden.apply(f, meta)?;
        let h = f.tape.relu(h)?;
        let raw = self.head.apply(f, h)?;
        let pooled = f.tape.channel_mean(raw)?;
        let mut out = Vec::with_capacity(self.paths);
        for p in 0..self.paths {
            let base = 2 * self.channels * p;
            let g = f.tape.slice_channels(pooled, base, self.channels)?;
            let g = f.tape.elu(g)?;
            let b = f.tape.slice_channels(pooled, base + self.channels, self.channels)?;
            out.push((g, b));
        }
        Ok(out)
    }

    /// Eager evaluation against a parameter store.
    pub fn generate(&self, store: &ParameterStore, meta: &MetadataVector, level_len: usize) -> Result<Vec<FilmParams>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = (0..store.len())
            .map(|i| tape.constant(store.value(i).clone()))
            .collect();
        let mut f = Forward::new(&mut tape, params, crate::tensor::Mode::Eval, 0);
        let m = f.tape.constant(resample(&meta.values, level_len)?);
        let pairs = self.forward(&mut f, m)?;
        Ok(pairs
            .into_iter()
            .map(|(g, b)| FilmParams {
                gamma_hat: tape.value(g).clone(),
                beta: tape.value(b).clone(),
            })
            .collect())
    }
}

/// Generators for every resolution level of a network.
#[derive(Clone, Debug, Default)]
pub struct FilmBank {
    pub generators: Vec<FilmGenerator>,
}

impl FilmBank {
    pub fn depth(&self) -> usize {
        self.generators.len()
    }

    /// Modulation for `level`, with metadata resampled to `L >> level`.
    pub fn film_generate(
        &self,
        store: &ParameterStore,
        meta: &MetadataVector,
        level: usize,
    ) -> Result<Vec<FilmParams>> {
        let g = self.generators.get(level).ok_or_else(|| {
            Error::config(format!(
                "FiLM level {level} out of range (depth {})",
                self.generators.len()
            ))
        })?;
        let len = meta.len() >> level;
        g.generate(store, meta, len.max(1))
    }
}
