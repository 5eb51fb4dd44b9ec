use std::path::Path;

use crate::artifact::{self, Header, PayloadReader, Version};
use crate::error::{Error, Result};

pub const RUN_MAGIC: &str = "NORN1";
pub const RUN_VERSION: Version = Version::new(1, 0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Control,
    Nudged,
    Corrected,
    Truth,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Control => "control",
            Provenance::Nudged => "nudged",
            Provenance::Corrected => "corrected",
            Provenance::Truth => "truth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Provenance::Control, Provenance::Nudged, Provenance::Corrected, Provenance::Truth]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// Window-boundary snapshots of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub provenance: Provenance,
    pub label: String,
    pub config_digest: String,
    pub seed: u64,
    pub window: usize,
    /// `horizon + 1` states, the first being the initial condition.
    pub snapshots: Vec<Vec<f64>>,
}

impl RunRecord {
    pub fn horizon(&self) -> usize {
        self.snapshots.len().saturating_sub(1)
    }

    pub fn sites(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.len())
    }

    pub fn is_finite(&self) -> bool {
        self.snapshots.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::default();
        h.push("provenance", self.provenance.as_str());
        h.push("label", &self.label);
        h.push("config", &self.config_digest);
        h.push("seed", self.seed);
        h.push("window", self.window);
        h.push("horizon", self.horizon());
        h.push("sites", self.sites());
        let mut payload = Vec::with_capacity(8 * self.snapshots.len() * self.sites());
        for s in &self.snapshots {
            artifact::put_f64s(&mut payload, s);
        }
        artifact::encode(RUN_MAGIC, RUN_VERSION, &h, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = artifact::decode(bytes, RUN_MAGIC, RUN_VERSION)?;
        let h = &f.header;
        let horizon: usize = h.parse("horizon")?;
        let sites: usize = h.parse("sites")?;
        let mut r = PayloadReader::new(&f.payload);
        let snapshots = (0..=horizon).map(|_| r.f64s(sites)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let record = Self {
            provenance: Provenance::parse(h.require("provenance")?)
                .ok_or_else(|| Error::format("unknown run provenance"))?,
            label: h.require("label")?.to_string(),
            config_digest: h.require("config")?.to_string(),
            seed: h.parse("seed")?,
            window: h.parse("window")?,
            snapshots,
        };
        if !record.is_finite() {
            return Err(Error::NonFinite(format!("run record `{}`", record.label)));
        }
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
