//! Trained-model checkpoints: architecture, normalization statistics and the
//! parameter blob in one framed file.

use std::path::Path;

use crate::archs::{build_model, ArchitectureConfig, ModelGraph, Variant};
use crate::artifact::{self, Header, Version};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::{PadMode, ParameterStore};
use crate::toyclimate::{Dataset, NormalizationStats};

pub const CHECKPOINT_MAGIC: &str = "NOCK1";
pub const CHECKPOINT_VERSION: Version = Version::new(1, 0);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureConfig,
    /// Initialization seed of the architecture.
    pub seed: u64,
    pub stats: NormalizationStats,
    pub meta_channels: Vec<String>,
    /// Steps per averaging window of the training data.
    pub window: usize,
    /// Digest of the experiment configuration that produced the checkpoint.
    pub config_digest: String,
    /// Completed training epochs.
    pub epoch: usize,
    /// Simulation epochs of the training split.
    pub train_epochs: Vec<usize>,
    pub params: ParameterStore,
}

fn pad_str(p: PadMode) -> &'static str {
    match p {
        PadMode::Zero => "zero",
        PadMode::Circular => "circular",
    }
}

fn parse_pad(s: &str) -> Result<PadMode> {
    match s {
        "zero" => Ok(PadMode::Zero),
        "circular" => Ok(PadMode::Circular),
        _ => Err(Error::format(format!("unknown padding `{s}`"))),
    }
}

pub(crate) fn join_usize(v: &[usize]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|e| e.parse().map_err(|_| Error::format(format!("bad integer list `{s}`"))))
        .collect()
}

pub(crate) fn write_arch(h: &mut Header, a: &ArchitectureConfig) {
    h.push("variant", a.variant);
    h.push("depth", a.depth);
    h.push("base_channels", a.base_channels);
    h.push("channels", a.channels);
    h.push("meta_channels", a.meta_channels);
    h.push("length", a.length);
    h.push("dropout", a.dropout);
    h.push("subsample", a.subsample);
    h.push("activation", a.activation.as_str());
    h.push("film_hidden", a.film_hidden);
    h.push("meta_embed", a.meta_embed);
    h.push("padding", pad_str(a.padding));
}

pub(crate) fn read_arch(h: &Header) -> Result<ArchitectureConfig> {
    let variant = Variant::parse(h.require("variant")?)
        .ok_or_else(|| Error::format(format!("unknown variant `{}`", h.get("variant").unwrap_or(""))))?;
    let mut a = ArchitectureConfig::new(variant, h.parse("channels")?, h.parse("meta_channels")?, h.parse("length")?);
    a.depth = h.parse("depth")?;
    a.base_channels = h.parse("base_channels")?;
    a.dropout = h.parse("dropout")?;
    a.subsample = h.parse("subsample")?;
    a.activation = Activation::parse(h.require("activation")?)
        .ok_or_else(|| Error::format("unknown activation"))?;
    a.film_hidden = h.parse("film_hidden")?;
    a.meta_embed = h.parse("meta_embed")?;
    a.padding = parse_pad(h.require("padding")?)?;
    a.validate()?;
    Ok(a)
}

impl Checkpoint {
    /// Snapshot of `model` trained on `data`.
    pub fn from_model(model: &ModelGraph, data: &Dataset, epoch: usize) -> Self {
        Self {
            arch: model.config.clone(),
            seed: model.seed,
            stats: data.stats.clone(),
            meta_channels: data.meta_channels.clone(),
            window: data.window,
            config_digest: data.config_digest.clone(),
            epoch,
            train_epochs: data.epochs.clone(),
            params: model.store.clone(),
        }
    }

    /// Rebuilds the network and loads the stored parameters into it.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let mut model = build_model(&self.arch, self.seed)?;
        let fresh: Vec<(&str, &[usize])> = model.store.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let stored: Vec<(&str, &[usize])> = self.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if fresh != stored {
            return Err(Error::format("checkpoint parameters do not match the architecture"));
        }
        model.store = self.params.clone();
        model.normalization_digest = Some(self.stats.digest());
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::default();
        write_arch(&mut h, &self.arch);
        h.push("seed", self.seed);
        h.push("window", self.window);
        h.push("epoch", self.epoch);
        h.push("train_epochs", join_usize(&self.train_epochs));
        h.push("config", &self.config_digest);
        h.push("stats_digest", self.stats.digest());
        for m in &self.meta_channels {
            h.push("meta_channel", m);
        }
        self.stats.write_header(&mut h);
        artifact::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &h, &self.params.to_blob())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = artifact::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let h = &f.header;
        let stats = NormalizationStats::read_header(h)?;
        let recorded = h.require("stats_digest")?;
        if recorded != stats.digest() {
            return Err(Error::Digest {
                expected: recorded.to_string(),
                found: stats.digest(),
            });
        }
        Ok(Self {
            arch: read_arch(h)?,
            seed: h.parse("seed")?,
            stats,
            meta_channels: h.all("meta_channel").map(String::from).collect(),
            window: h.parse("window")?,
            config_digest: h.require("config")?.to_string(),
            epoch: h.parse("epoch")?,
            train_epochs: parse_usize_list(h.require("train_epochs")?)?,
            params: ParameterStore::from_blob(&f.payload)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archs::{preset, Preset};
    use crate::toyclimate::Split;

    fn stats() -> NormalizationStats {
        NormalizationStats {
            channels: vec!["x".into()],
            state_min: vec![-5.0],
            state_max: vec![10.0],
            tendency_min: vec![-3.0],
            tendency_max: vec![3.0],
        }
    }

    fn data(length: usize) -> Dataset {
        Dataset {
            split: Split::Train,
            channels: vec!["x".into()],
            meta_channels: ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
            length,
            window: 6,
            subsample: 1,
            epochs: vec![0, 1],
            forcing: 10.0,
            stats: stats(),
            config_digest: "abc".into(),
            samples: Vec::new(),
            migration: None,
        }
    }

    #[test]
    fn round_trip_preserves_parameter_bytes() {
        let cfg = preset(Variant::Mnm, Preset::Large, 1, 4, 36).unwrap();
        let model = build_model(&cfg, 5).unwrap();
        let ck = Checkpoint::from_model(&model, &data(36), 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.to_blob(), model.store.to_blob());
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.store.to_blob(), model.store.to_blob());
        assert_eq!(rebuilt.normalization_digest, Some(stats().digest()));
    }

    #[test]
    fn truncated_checkpoint_is_a_digest_error() {
        let cfg = preset(Variant::Unet, Preset::Toy, 1, 4, 16).unwrap();
        let model = build_model(&cfg, 1).unwrap();
        let bytes = Checkpoint::from_model(&model, &data(16), 0).to_bytes();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Digest { .. })));
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let cfg = preset(Variant::Unet, Preset::Toy, 1, 4, 16).unwrap();
        let model = build_model(&cfg, 1).unwrap();
        let mut ck = Checkpoint::from_model(&model, &data(16), 0);
        ck.arch.base_channels = 4;
        assert!(ck.to_model().is_err());
    }
}
