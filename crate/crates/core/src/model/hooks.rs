//! Addressable activation sites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Token embedding written into the residual stream (layer is always 0).
    Embed,
    /// Per-head attention output before the output projection.
    HeadOut,
    /// Post-softmax attention row of a head, one row per destination.
    AttnPattern,
    /// Per-head value vectors at each source position.
    ValueVectors,
    /// Attention block output after the output projection.
    AttnOut,
    MlpOut,
    /// Residual stream at the last block's output, before the final norm
    /// (layer is always 0).
    ResidFinal,
}

impl SiteKind {
    pub const ALL: [SiteKind; 7] = [
        Self::Embed,
        Self::HeadOut,
        Self::AttnPattern,
        Self::ValueVectors,
        Self::AttnOut,
        Self::MlpOut,
        Self::ResidFinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Embed => "embed",
            Self::HeadOut => "head_out",
            Self::AttnPattern => "attn_pattern",
            Self::ValueVectors => "value_vectors",
            Self::AttnOut => "attn_out",
            Self::MlpOut => "mlp_out",
            Self::ResidFinal => "resid_final",
        }
    }

    pub fn needs_head(self) -> bool {
        matches!(self, Self::HeadOut | Self::AttnPattern | Self::ValueVectors)
    }

    /// Whether the kind writes to the residual stream and can be patched.
    pub fn is_patchable(self) -> bool {
        matches!(self, Self::Embed | Self::HeadOut | Self::AttnOut | Self::MlpOut)
    }
}

impl FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Input(format!("unknown site kind `{s}`")))
    }
}

/// A component kind at a layer (and head, for per-head kinds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HookSite {
    pub kind: SiteKind,
    pub layer: usize,
    pub head: Option<usize>,
}

impl HookSite {
    pub fn embed() -> Self {
        Self { kind: SiteKind::Embed, layer: 0, head: None }
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self { kind: SiteKind::MlpOut, layer, head: None }
    }

    pub fn attn_out(layer: usize) -> Self {
        Self { kind: SiteKind::AttnOut, layer, head: None }
    }

    pub fn head_out(layer: usize, head: usize) -> Self {
        Self { kind: SiteKind::HeadOut, layer, head: Some(head) }
    }

    pub fn attn_pattern(layer: usize, head: usize) -> Self {
        Self { kind: SiteKind::AttnPattern, layer, head: Some(head) }
    }

    pub fn value_vectors(layer: usize, head: usize) -> Self {
        Self { kind: SiteKind::ValueVectors, layer, head: Some(head) }
    }

    pub fn resid_final() -> Self {
        Self { kind: SiteKind::ResidFinal, layer: 0, head: None }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match (self.kind.needs_head(), self.head) {
            (true, None) => return Err(Error::Config(format!("site {} requires a head index", self.kind.name()))),
            (false, Some(_)) => return Err(Error::Config(format!("site {} takes no head index", self.kind.name()))),
            _ => {}
        }
        if matches!(self.kind, SiteKind::Embed | SiteKind::ResidFinal) && self.layer != 0 {
            return Err(Error::Config(format!("site {} is addressed as layer 0", self.kind.name())));
        }
        if self.layer >= config.n_layers {
            return Err(Error::Config(format!("layer {} out of range for {} layers", self.layer, config.n_layers)));
        }
        if let Some(h) = self.head {
            if h >= config.n_heads {
                return Err(Error::Config(format!("head {h} out of range for {} heads", config.n_heads)));
            }
        }
        Ok(())
    }

    /// Length of the vector stored per position.
    pub fn width(&self, config: &ModelConfig, token_len: usize) -> usize {
        match self.kind {
            SiteKind::Embed | SiteKind::AttnOut | SiteKind::MlpOut | SiteKind::ResidFinal => config.d_model,
            SiteKind::HeadOut | SiteKind::ValueVectors => config.head_dim,
            SiteKind::AttnPattern => token_len,
        }
    }

    /// Position in forward order, used to apply multi-site patches in
    /// layer order.
    pub fn execution_rank(&self) -> (usize, usize, usize) {
        let stage = match self.kind {
            SiteKind::Embed => return (0, 0, 0),
            SiteKind::ResidFinal => return (usize::MAX, 0, 0),
            SiteKind::ValueVectors => 0,
            SiteKind::AttnPattern => 1,
            SiteKind::HeadOut => 2,
            SiteKind::AttnOut => 3,
            SiteKind::MlpOut => 4,
        };
        (self.layer + 1, stage, self.head.unwrap_or(0))
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SiteKind::Embed | SiteKind::ResidFinal => f.write_str(self.kind.name()),
            _ => match self.head {
                Some(h) => write!(f, "{}.{}.{}", self.kind.name(), self.layer, h),
                None => write!(f, "{}.{}", self.kind.name(), self.layer),
            },
        }
    }
}

impl FromStr for HookSite {
    type Err = Error;

    /// Parses the `Display` form: `mlp_out.3`, `head_out.1.2`, `embed`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('.');
        let kind: SiteKind = parts.next().unwrap_or_default().parse()?;
        let nums = parts
            .map(|p| p.parse::<usize>().map_err(|_| Error::Input(format!("bad site `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let site = match (kind, nums.as_slice()) {
            (SiteKind::Embed | SiteKind::ResidFinal, []) => Self { kind, layer: 0, head: None },
            (k, [l]) if !k.needs_head() => Self { kind, layer: *l, head: None },
            (k, [l, h]) if k.needs_head() => Self { kind, layer: *l, head: Some(*h) },
            _ => return Err(Error::Input(format!("bad site `{s}`"))),
        };
        Ok(site)
    }
}

impl Serialize for HookSite {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookSite {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_round_trip() {
        for site in [
            HookSite::embed(),
            HookSite::mlp_out(3),
            HookSite::attn_out(0),
            HookSite::head_out(1, 2),
            HookSite::attn_pattern(4, 7),
            HookSite::value_vectors(0, 0),
            HookSite::resid_final(),
        ] {
            assert_eq!(site.to_string().parse::<HookSite>().unwrap(), site);
        }
        assert!("head_out.1".parse::<HookSite>().is_err());
        assert!("mlp_out.1.2".parse::<HookSite>().is_err());
        assert!("nope.1".parse::<HookSite>().is_err());
    }

    #[test]
    fn execution_rank_follows_forward_order() {
        let mut sites = vec![
            HookSite::mlp_out(1),
            HookSite::attn_out(1),
            HookSite::mlp_out(0),
            HookSite::head_out(0, 1),
            HookSite::embed(),
        ];
        sites.sort_by_key(HookSite::execution_rank);
        assert_eq!(
            sites,
            vec![
                HookSite::embed(),
                HookSite::head_out(0, 1),
                HookSite::mlp_out(0),
                HookSite::attn_out(1),
                HookSite::mlp_out(1)
            ]
        );
    }
}
