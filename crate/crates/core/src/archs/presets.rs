use super::{ArchitectureConfig, Variant};
use crate::error::{Error, Result};

/// Named width settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Minimal widths for gradient checks and smoke tests.
    Toy,
    /// The compact baseline network.
    Small,
    /// The budget-matched comparison size.
    Large,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Small => "small",
            Preset::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Preset::Toy, Preset::Small, Preset::Large]
            .into_iter()
            .find(|p| p.as_str() == s)
    }

    /// Documented parameter budget for the default problem size
    /// (`C = 1`, `M = 4`, `L = 36`, depth 2).
    pub fn target_budget(self) -> Option<usize> {
        match self {
            Preset::Toy => None,
            Preset::Small => Some(SMALL_BUDGET),
            Preset::Large => Some(LARGE_BUDGET),
        }
    }
}

pub const SMALL_BUDGET: usize = 2_000;
pub const LARGE_BUDGET: usize = 9_000;

/// `(base_channels, film_hidden, meta_embed)` per variant and preset.
fn widths(variant: Variant, p: Preset) -> Option<(usize, usize, usize)> {
    use Preset::*;
    use Variant::*;
    match (variant, p) {
        (Iunet, Toy) => Some((4, 3, 2)),
        (_, Toy) => Some((2, 3, 0)),
        (Unet, Small) => Some((3, 4, 0)),
        (UnetMp, Large) => Some((7, 2, 0)),
        (Iunet, Large) => Some((8, 10, 8)),
        (Mnm, Large) => Some((4, 12, 0)),
        _ => None,
    }
}

/// Configuration for a named preset. The small preset exists only for the
/// plain UNet; the large preset only for the three compared variants.
pub fn preset(
    variant: Variant,
    p: Preset,
    channels: usize,
    meta_channels: usize,
    length: usize,
) -> Result<ArchitectureConfig> {
    let (base, hidden, embed) = widths(variant, p).ok_or_else(|| {
        Error::config(format!("no `{}` preset for variant `{variant}`", p.as_str()))
    })?;
    let mut cfg = ArchitectureConfig::new(variant, channels, meta_channels, length);
    cfg.base_channels = base;
    cfg.film_hidden = hidden;
    cfg.meta_embed = embed;
    Ok(cfg)
}
