//! Encoder–decoder correctors mapping a normalized state `(B, C, L)` to a
//! normalized tendency of the same shape.
//!
//! All four variants share the skeleton: `depth` halving levels with channel
//! width `base · 2^k`, a bottleneck, a mirrored decoder with skip
//! concatenation, FiLM after every stage and a zero-initialized 1x1 head.

mod blocks;
mod presets;

pub use blocks::{DoubleConv, DownMultiBlock, InceptUpsample, InceptionBlock, MetaEmbed, UpMultiBlock, UpSampler};
pub use presets::{preset, Preset};

use crate::conditioning::{resample, FilmBank, FilmGenerator};
use crate::error::{Error, Result};
use crate::layers::{Activation, Conv, Forward, InitKind, NormUpdate};
use crate::tensor::{kernels, Mode, PadMode, ParameterStore, PoolKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unet,
    UnetMp,
    Iunet,
    Mnm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Unet, Variant::UnetMp, Variant::Iunet, Variant::Mnm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetMp => "unet_mp",
            Variant::Iunet => "iunet",
            Variant::Mnm => "mnm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    /// Number of halving levels.
    pub depth: usize,
    pub base_channels: usize,
    /// State channels; the output has the same count.
    pub channels: usize,
    pub meta_channels: usize,
    pub length: usize,
    pub dropout: f64,
    /// 1 or 2; with 2 the network runs on every other site and the output is
    /// interpolated back.
    pub subsample: usize,
    pub activation: Activation,
    pub film_hidden: usize,
    /// Width of the metadata embedding concatenated in the inception variant.
    pub meta_embed: usize,
    pub padding: PadMode,
}

impl ArchitectureConfig {
    pub fn new(variant: Variant, channels: usize, meta_channels: usize, length: usize) -> Self {
        Self {
            variant,
            depth: 2,
            base_channels: 8,
            channels,
            meta_channels,
            length,
            dropout: 0.2,
            subsample: 1,
            activation: Activation::Relu,
            film_hidden: 8,
            meta_embed: 4,
            padding: PadMode::Zero,
        }
    }

    pub fn internal_length(&self) -> usize {
        self.length / self.subsample.max(1)
    }

    /// Feature width at level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.base_channels << k
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.depth == 0 {
            problems.push("depth must be at least 1".to_string());
        }
        if self.base_channels == 0 || self.channels == 0 || self.meta_channels == 0 {
            problems.push("channel counts must be positive".to_string());
        }
        if self.film_hidden == 0 {
            problems.push("film_hidden must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.subsample != 1 && self.subsample != 2 {
            problems.push(format!("subsample factor {} not in {{1, 2}}", self.subsample));
        } else if self.length % self.subsample != 0 {
            problems.push(format!("length {} not divisible by subsample {}", self.length, self.subsample));
        }
        if self.depth < 16 {
            let unit = 1usize << self.depth;
            let inner = self.internal_length();
            if inner == 0 || inner % unit != 0 {
                problems.push(format!(
                    "internal length {inner} not divisible by 2^depth = {unit}"
                ));
            }
        } else {
            problems.push(format!("depth {} too large", self.depth));
        }
        if self.variant == Variant::Iunet {
            if self.base_channels % 4 != 0 {
                problems.push(format!(
                    "inception variant needs base channels divisible by 4, got {}",
                    self.base_channels
                ));
            }
            if self.meta_embed == 0 {
                problems.push("inception variant needs a positive metadata embedding width".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Double(DoubleConv),
    Inception(InceptionBlock),
}

impl Stage {
    fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        match self {
            Stage::Double(b) => b.apply(f, x),
            Stage::Inception(b) => b.apply(f, x),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Option<DownMultiBlock>,
    stage: Stage,
    embed: Option<MetaEmbed>,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    down: Option<DownMultiBlock>,
    stages: Vec<Stage>,
    embed: Option<MetaEmbed>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: UpSampler,
    stage: Stage,
    embed: Option<MetaEmbed>,
}

/// Result of one forward pass on a tape.
pub struct ForwardOutput {
    pub output: Var,
    /// Named intermediate activations (`enc{k}`, `bottleneck`, `dec{k}`, and
    /// `head` before any interpolation back to full length).
    pub taps: Vec<(String, Var)>,
}

/// A built network: configuration, parameters and layer wiring.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ArchitectureConfig,
    pub seed: u64,
    pub store: ParameterStore,
    pub film: FilmBank,
    /// Digest of the normalization statistics the model was trained against.
    pub normalization_digest: Option<String>,
    encoder: Vec<EncoderLevel>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

pub fn build_model(cfg: &ArchitectureConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let s = &mut store;
    let (act, pad, d) = (cfg.activation, cfg.padding, cfg.depth);
    let e = if cfg.variant == Variant::Iunet { cfg.meta_embed } else { 0 };

    let stage = |s: &mut ParameterStore, name: &str, cin: usize, cout: usize| -> Result<Stage> {
        Ok(match cfg.variant {
            Variant::Iunet => Stage::Inception(InceptionBlock::register(s, seed, name, cin, cout, act, pad)?),
            _ => Stage::Double(DoubleConv::register(s, seed, name, cin, cout, act, pad)?),
        })
    };
    let embed = |s: &mut ParameterStore, name: &str| -> Result<Option<MetaEmbed>> {
        if e > 0 {
            Ok(Some(MetaEmbed::register(s, seed, name, cfg.meta_channels, e)?))
        } else {
            Ok(None)
        }
    };

    let mut encoder = Vec::with_capacity(d);
    let mut cin = cfg.channels;
    for k in 0..d {
        let name = format!("enc{k}");
        let down = if cfg.variant == Variant::Mnm && k > 0 {
            Some(DownMultiBlock::register(s, seed, &format!("{name}.down"), cin, cin, act, pad)?)
        } else {
            None
        };
        let st = stage(s, &name, cin, cfg.width(k))?;
        encoder.push(EncoderLevel {
            down,
            stage: st,
            embed: embed(s, &format!("{name}.meta"))?,
        });
        cin = cfg.width(k) + e;
    }

    let down = if cfg.variant == Variant::Mnm {
        Some(DownMultiBlock::register(s, seed, "mid.down", cin, cin, act, pad)?)
    } else {
        None
    };
    let mut stages = vec![stage(s, "mid.block1", cin, cfg.width(d))?];
    if cfg.variant == Variant::Iunet {
        stages.push(stage(s, "mid.block2", cfg.width(d), cfg.width(d))?);
    }
    let bottleneck = Bottleneck {
        down,
        stages,
        embed: embed(s, "mid.meta")?,
    };

    let mut decoder = Vec::with_capacity(d);
    let mut below = cfg.width(d) + e;
    for k in (0..d).rev() {
        let name = format!("dec{k}");
        let ck = cfg.width(k);
        let skip = ck + e;
        let up = match cfg.variant {
            Variant::Mnm => UpSampler::Multi(UpMultiBlock::register(s, seed, &format!("{name}.up"), below, ck, below, pad)?),
            _ => UpSampler::transpose(s, seed, &format!("{name}.up"), below, ck)?,
        };
        let st = stage(s, &name, up.out_channels() + skip, ck)?;
        decoder.push(DecoderLevel {
            up,
            stage: st,
            embed: embed(s, &format!("{name}.meta"))?,
        });
        below = ck + e;
    }
    decoder.reverse();

    let head = Conv::register(s, seed, "head", below, cfg.channels, 1, 1, 0, pad, InitKind::Zero)?;

    let mut film = FilmBank::default();
    for k in 0..=d {
        let paths = if k == d { 1 } else { 2 };
        film.generators
            .push(FilmGenerator::register(s, seed, k, cfg.meta_channels, cfg.film_hidden, cfg.width(k), paths)?);
    }

    Ok(ModelGraph {
        config: cfg.clone(),
        seed,
        store,
        film,
        normalization_digest: None,
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

/// Closed-form parameter count (all registry entries, normalization buffers
/// included) for a configuration.
///
/// With widths `c_k = base · 2^k`, embedding width `E` (inception variant
/// only, otherwise 0), input channels `C`, metadata channels `M`, FiLM hidden
/// width `H` and depth `D`:
///
/// * encoder level `k` takes `a_k` channels (`a_0 = C`, `a_k = c_{k-1} + E`);
///   the bottleneck takes `a_D`;
/// * a double-conv stage `i → o` costs `3io + o + 3o² + o + 8o`;
/// * an inception stage `i → o` with `q = o/4` costs `4(iq + q) + 8q² + 2q + 4o`;
/// * a down block `i → i` costs `9i² + 3i + 3i² + i + 4i`;
/// * a decoder level `k` upsamples `b_k = c_{k+1} + E` channels: transpose
///   conv `2 b_k c_k + c_k`, or the three-branch block with branch width
///   `c_k` and fusion width `b_k`;
/// * the head costs `(c_0 + E)·C + C`; FiLM level `k` costs
///   `MH + H + H·2c_k·p_k + 2c_k·p_k` with `p_k = 2` below the bottleneck and
///   1 at it;
/// * each embedding costs `ME + E + E² + E`.
pub fn analytic_param_count(cfg: &ArchitectureConfig) -> usize {
    let d = cfg.depth;
    let e = if cfg.variant == Variant::Iunet { cfg.meta_embed } else { 0 };
    let (m, h, c) = (cfg.meta_channels, cfg.film_hidden, cfg.channels);
    let w = |k: usize| cfg.width(k);
    let conv = |i: usize, o: usize, k: usize| o * i * k + o;
    let double = |i: usize, o: usize| conv(i, o, 3) + conv(o, o, 3) + 8 * o;
    let inception = |i: usize, o: usize| {
        let q = o / 4;
        4 * conv(i, q, 1) + conv(q, q, 3) + conv(q, q, 5) + 4 * o
    };
    let stage = |i: usize, o: usize| {
        if cfg.variant == Variant::Iunet {
            inception(i, o)
        } else {
            double(i, o)
        }
    };
    let down = |i: usize| 3 * conv(i, i, 3) + conv(3 * i, i, 1) + 4 * i;
    let embed = if e > 0 { conv(m, e, 1) + conv(e, e, 1) } else { 0 };
    let input = |k: usize| if k == 0 { c } else { w(k - 1) + e };

    let mut total = 0;
    for k in 0..d {
        total += stage(input(k), w(k)) + embed;
        if cfg.variant == Variant::Mnm && k > 0 {
            total += down(input(k));
        }
    }
    total += stage(input(d), w(d)) + embed;
    if cfg.variant == Variant::Iunet {
        total += stage(w(d), w(d));
    }
    if cfg.variant == Variant::Mnm {
        total += down(input(d));
    }
    for k in 0..d {
        let b = w(k + 1) + e;
        let up_out = match cfg.variant {
            Variant::Mnm => {
                let q = w(k);
                total += 2 * b * q + q
                    + conv(b, q, 3)
                    + conv(b, q, 5)
                    + conv(b, q, 7)
                    + conv(3 * q, q, 1)
                    + conv(b, 2 * q, 1)
                    + conv(3 * q, b, 1);
                b
            }
            _ => {
                total += 2 * b * w(k) + w(k);
                w(k)
            }
        };
        total += stage(up_out + w(k) + e, w(k)) + embed;
    }
    total += conv(w(0) + e, c, 1);
    for k in 0..=d {
        let p = if k == d { 1 } else { 2 };
        total += conv(m, h, 1) + conv(h, 2 * w(k) * p, 1);
    }
    total
}

impl ModelGraph {
    /// Every registry entry, normalization buffers included.
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Decoder upsamplers indexed by level (0 = finest).
    pub fn up_samplers(&self) -> Vec<&UpSampler> {
        self.decoder.iter().map(|d| &d.up).collect()
    }

    fn check_inputs(&self, state: &Tensor, meta: &Tensor) -> Result<usize> {
        let (b, c, l) = state.dims3()?;
        let cfg = &self.config;
        if c != cfg.channels || l != cfg.length {
            return Err(Error::shape(format!(
                "state is ({c}, {l}), model expects ({}, {})",
                cfg.channels, cfg.length
            )));
        }
        let (mb, mc, ml) = meta.dims3()?;
        if (mb != b && mb != 1) || mc != cfg.meta_channels || ml != l {
            return Err(Error::shape(format!(
                "metadata is ({mb}, {mc}, {ml}), expected ({b}, {}, {l})",
                cfg.meta_channels
            )));
        }
        if !state.is_finite() {
            return Err(Error::NonFinite("model input state".into()));
        }
        if !meta.is_finite() {
            return Err(Error::NonFinite("model input metadata".into()));
        }
        Ok(b)
    }

    /// Forward pass on `f.tape` with parameters already bound in `f.params`.
    /// `meta` is `(B, M, L)` or `(1, M, L)` (broadcast over the batch).
    pub fn forward_with(&self, f: &mut Forward, state: Var, meta: &Tensor) -> Result<ForwardOutput> {
        let batch = self.check_inputs(f.tape.value(state), meta)?;
        let cfg = &self.config;
        let meta = if meta.shape()[0] == batch {
            meta.clone()
        } else {
            let (_, mc, ml) = meta.dims3()?;
            let data: Vec<f64> = (0..batch).flat_map(|_| meta.data().iter().copied()).collect();
            Tensor::new([batch, mc, ml], data)?
        };
        let (x, meta) = if cfg.subsample > 1 {
            (
                f.tape.subsample1d(state, cfg.subsample)?,
                kernels::subsample1d(&meta, cfg.subsample)?,
            )
        } else {
            (state, meta)
        };
        let inner = cfg.internal_length();
        let d = cfg.depth;
        let mut meta_vars = Vec::with_capacity(d + 1);
        for k in 0..=d {
            let m = resample(&meta, inner >> k)?;
            meta_vars.push(f.tape.constant(m));
        }
        let mut films = Vec::with_capacity(d + 1);
        for (k, g) in self.film.generators.iter().enumerate() {
            films.push(g.forward(f, meta_vars[k])?);
        }

        let mut taps = Vec::new();
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for (k, level) in self.encoder.iter().enumerate() {
            if k > 0 {
                h = self.downsample(f, h, level.down.as_ref())?;
            }
            h = level.stage.apply(f, h)?;
            let (g, b) = films[k][0];
            h = f.tape.film(h, g, b)?;
            if let Some(em) = &level.embed {
                let emb = em.apply(f, meta_vars[k])?;
                h = f.tape.concat(&[h, emb])?;
            }
            taps.push((format!("enc{k}"), h));
            skips.push(h);
        }

        h = self.downsample(f, h, self.bottleneck.down.as_ref())?;
        for (i, st) in self.bottleneck.stages.iter().enumerate() {
            h = st.apply(f, h)?;
            if i == 0 && cfg.dropout > 0.0 {
                let mode = f.mode;
                h = f.tape.dropout(h, cfg.dropout, mode, &mut f.rng)?;
            }
        }
        let (g, b) = films[d][0];
        h = f.tape.film(h, g, b)?;
        if let Some(em) = &self.bottleneck.embed {
            let emb = em.apply(f, meta_vars[d])?;
            h = f.tape.concat(&[h, emb])?;
        }
        taps.push(("bottleneck".to_string(), h));

        for k in (0..d).rev() {
            let level = &self.decoder[k];
            let up = level.up.apply(f, h)?;
            h = f.tape.concat(&[up, skips[k]])?;
            h = level.stage.apply(f, h)?;
            let (g, b) = films[k][1];
            h = f.tape.film(h, g, b)?;
            if let Some(em) = &level.embed {
                let emb = em.apply(f, meta_vars[k])?;
                h = f.tape.concat(&[h, emb])?;
            }
            taps.push((format!("dec{k}"), h));
        }

        let mut out = self.head.apply(f, h)?;
        taps.push(("head".to_string(), out));
        if cfg.subsample > 1 {
            out = f.tape.upsample_linear1d(out, cfg.subsample)?;
        }
        Ok(ForwardOutput { output: out, taps })
    }

    fn downsample(&self, f: &mut Forward, h: Var, block: Option<&DownMultiBlock>) -> Result<Var> {
        match block {
            Some(b) => b.apply(f, h),
            None => f.tape.pool1d(h, PoolKind::Max, 2, 2),
        }
    }

    /// Binds the parameters onto `tape` and runs the forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        state: &Tensor,
        meta: &Tensor,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(ForwardOutput, Vec<Var>, Vec<NormUpdate>)> {
        let params = self.store.bind(tape);
        let x = tape.constant(state.clone());
        let mut f = Forward::new(tape, params.clone(), mode, dropout_seed);
        let out = self.forward_with(&mut f, x, meta)?;
        let updates = std::mem::take(&mut f.norm_updates);
        Ok((out, params, updates))
    }

    /// Eval-mode prediction.
    pub fn predict(&self, state: &Tensor, meta: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _, _) = self.forward(&mut tape, state, meta, Mode::Eval, 0)?;
        let y = tape.value(out.output).clone();
        if !y.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(y)
    }
}
