//! De-noising activation patching.
//!
//! A clean run is captured once; corrupt runs are then replayed with chosen
//! component outputs overwritten by their clean values. Total-effect patches
//! let every downstream component react; direct-effect patches add only the
//! component's own clean−corrupt residual delta at the final position,
//! freezing everything downstream.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::model::{head_contribution, run, ForwardOutput, HookSite, LogitsScope, Model, PatchMap, SiteKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    All,
    /// The positions where clean and corrupt prompts differ.
    IdentityOnly,
    Explicit(Vec<usize>),
}

impl PositionScope {
    pub fn resolve(&self, token_len: usize, identity_positions: &[usize]) -> Result<Vec<usize>> {
        let mut out = match self {
            Self::All => (0..token_len).collect(),
            Self::IdentityOnly => identity_positions.to_vec(),
            Self::Explicit(p) => p.clone(),
        };
        out.sort_unstable();
        out.dedup();
        if let Some(&bad) = out.iter().find(|&&p| p >= token_len) {
            return Err(Error::Config(format!("patch position {bad} outside a {token_len}-token sequence")));
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        match self {
            Self::All => "all".into(),
            Self::IdentityOnly => "identity_only".into(),
            Self::Explicit(p) => {
                let s: Vec<String> = p.iter().map(usize::to_string).collect();
                format!("explicit:{}", s.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Total,
    Direct,
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Total => "total",
            Self::Direct => "direct",
        })
    }
}

/// Which components, at which positions, in which effect mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub sites: Vec<HookSite>,
    pub positions: PositionScope,
    pub mode: PatchMode,
}

impl PatchSpec {
    pub fn new(site: HookSite, positions: PositionScope, mode: PatchMode) -> Self {
        Self { sites: vec![site], positions, mode }
    }

    pub fn multi(sites: Vec<HookSite>, positions: PositionScope, mode: PatchMode) -> Self {
        Self { sites, positions, mode }
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Config("patch spec names no sites".into()));
        }
        for s in &self.sites {
            s.validate(model.config())?;
            if !s.kind.is_patchable() {
                return Err(Error::Config(format!(
                    "{} cannot be patched; use embed, mlp_out, attn_out or head_out",
                    s.kind.name()
                )));
            }
        }
        Ok(())
    }

    /// Sites in forward-execution order.
    pub fn ordered_sites(&self) -> Vec<HookSite> {
        let mut s = self.sites.clone();
        s.sort_by_key(HookSite::execution_rank);
        s.dedup();
        s
    }

    /// Lowest layer any of the sites lives in (embed counts as layer 0).
    pub fn min_layer(&self) -> usize {
        self.sites.iter().map(|s| s.layer).min().unwrap_or(0)
    }

    pub fn max_layer(&self) -> usize {
        self.sites.iter().map(|s| s.layer).max().unwrap_or(0)
    }
}

/// Clean run: captures `sites` at every position and records the logits.
pub fn capture<T: Scalar>(
    model: &Model<T>,
    clean_tokens: &[u32],
    sites: &BTreeSet<HookSite>,
) -> Result<ActivationCache<T>> {
    Ok(run(model, clean_tokens, sites, &PatchMap::new(), LogitsScope::Last)?.cache)
}

fn check_cache<T: Scalar>(model: &Model<T>, tokens: &[u32], cache: &ActivationCache<T>) -> Result<()> {
    cache.check_fingerprint(model.fingerprint())?;
    if cache.token_len() != tokens.len() {
        return Err(Error::Input(format!(
            "cache covers {} tokens but the corrupt prompt has {}",
            cache.token_len(),
            tokens.len()
        )));
    }
    Ok(())
}

fn patch_map<'a, T: Scalar>(
    spec: &PatchSpec,
    positions: &[usize],
    cache: &'a ActivationCache<T>,
) -> Result<PatchMap<'a, T>> {
    let mut map = PatchMap::new();
    for site in spec.ordered_sites() {
        for &p in positions {
            map.insert((site, p), cache.require(site, p)?);
        }
    }
    Ok(map)
}

/// Total-effect patch: corrupt forward with the clean values substituted
/// before their residual add; returns last-position logits.
pub fn patch_total<T: Scalar>(
    model: &Model<T>,
    corrupt_tokens: &[u32],
    cache: &ActivationCache<T>,
    spec: &PatchSpec,
    identity_positions: &[usize],
) -> Result<Vec<T>> {
    let out = patch_total_capturing(model, corrupt_tokens, cache, spec, identity_positions, &BTreeSet::new())?;
    Ok(out.logits.into_data())
}

/// [`patch_total`] that also captures `observe` during the patched run.
/// Captured values reflect the patched state.
pub fn patch_total_capturing<T: Scalar>(
    model: &Model<T>,
    corrupt_tokens: &[u32],
    cache: &ActivationCache<T>,
    spec: &PatchSpec,
    identity_positions: &[usize],
    observe: &BTreeSet<HookSite>,
) -> Result<ForwardOutput<T>> {
    if spec.mode != PatchMode::Total {
        return Err(Error::Config("patch_total needs a total-mode spec".into()));
    }
    spec.validate(model)?;
    check_cache(model, corrupt_tokens, cache)?;
    let positions = spec.positions.resolve(corrupt_tokens.len(), identity_positions)?;
    let patches = patch_map(spec, &positions, cache)?;
    let out = run(model, corrupt_tokens, observe, &patches, LogitsScope::Last)?;
    Ok(ForwardOutput { logits: out.logits, cache: out.cache })
}

/// Sites a corrupt run must capture so direct effects can be evaluated
/// against it.
pub fn direct_baseline_sites(spec: &PatchSpec) -> BTreeSet<HookSite> {
    let mut s: BTreeSet<HookSite> = spec.sites.iter().copied().collect();
    s.insert(HookSite::resid_final());
    s
}

/// Residual shift at the last position: the sum over the spec's sites of
/// (clean − corrupt) residual contribution. Zero when the last position is
/// not patched, since only the last position writes directly to the
/// answer logits.
pub fn direct_delta<T: Scalar>(
    model: &Model<T>,
    clean: &ActivationCache<T>,
    corrupt: &ActivationCache<T>,
    spec: &PatchSpec,
    identity_positions: &[usize],
) -> Result<Vec<T>> {
    let n = corrupt.token_len();
    let last = n - 1;
    let positions = spec.positions.resolve(n, identity_positions)?;
    let mut delta = vec![T::zero(); model.config().d_model];
    if !positions.contains(&last) {
        return Ok(delta);
    }
    for site in spec.ordered_sites() {
        let c = clean.require(site, last)?;
        let k = corrupt.require(site, last)?;
        let (c, k) = match site.kind {
            SiteKind::HeadOut => {
                let h = site.head.expect("validated head site");
                (head_contribution(model, site.layer, h, c)?, head_contribution(model, site.layer, h, k)?)
            }
            _ => (c.to_vec(), k.to_vec()),
        };
        for ((d, a), b) in delta.iter_mut().zip(&c).zip(&k) {
            *d = *d + (*a - *b);
        }
    }
    Ok(delta)
}

/// Direct-effect logits from an already captured corrupt run (which must
/// hold the spec's sites and `resid_final`).
pub fn patch_direct_from<T: Scalar>(
    model: &Model<T>,
    clean: &ActivationCache<T>,
    corrupt: &ActivationCache<T>,
    spec: &PatchSpec,
    identity_positions: &[usize],
) -> Result<Vec<T>> {
    if spec.mode != PatchMode::Direct {
        return Err(Error::Config("patch_direct needs a direct-mode spec".into()));
    }
    spec.validate(model)?;
    clean.check_fingerprint(model.fingerprint())?;
    corrupt.check_fingerprint(model.fingerprint())?;
    if clean.token_len() != corrupt.token_len() {
        return Err(Error::Input("clean and corrupt caches differ in length".into()));
    }
    let last = corrupt.token_len() - 1;
    let delta = direct_delta(model, clean, corrupt, spec, identity_positions)?;
    let mut resid = corrupt.require(HookSite::resid_final(), last)?.to_vec();
    for (r, d) in resid.iter_mut().zip(&delta) {
        if *d != T::zero() {
            *r = *r + *d;
        }
    }
    model.logits_from_residual(&resid)
}

/// Direct-effect patch: the unmodified corrupt run with the component's
/// clean−corrupt delta injected into the last position's pre-norm residual.
pub fn patch_direct<T: Scalar>(
    model: &Model<T>,
    corrupt_tokens: &[u32],
    cache: &ActivationCache<T>,
    spec: &PatchSpec,
    identity_positions: &[usize],
) -> Result<Vec<T>> {
    spec.validate(model)?;
    check_cache(model, corrupt_tokens, cache)?;
    let corrupt = capture(model, corrupt_tokens, &direct_baseline_sites(spec))?;
    patch_direct_from(model, cache, &corrupt, spec, identity_positions)
}

/// Indirect effect: total minus direct.
pub fn indirect_effect(total_metric: f64, direct_metric: f64) -> f64 {
    total_metric - direct_metric
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indirect_is_total_minus_direct() {
        assert_eq!(indirect_effect(0.8, 0.8), 0.0);
        assert!((indirect_effect(1.5, 0.2) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn scope_resolution() {
        assert_eq!(PositionScope::All.resolve(3, &[1]).unwrap(), vec![0, 1, 2]);
        assert_eq!(PositionScope::IdentityOnly.resolve(9, &[5, 2]).unwrap(), vec![2, 5]);
        assert_eq!(PositionScope::Explicit(vec![4, 4, 1]).resolve(5, &[]).unwrap(), vec![1, 4]);
        assert!(PositionScope::Explicit(vec![5]).resolve(5, &[]).is_err());
    }
}
