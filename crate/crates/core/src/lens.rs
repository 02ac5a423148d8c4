//! Value-weighted attention analysis of individual heads.
//!
//! The value-weighted attention from `dest` to `src` is the head's attention
//! weight scaled by the L2 norm of the value vector at `src`; it measures
//! how much content the head actually moves from that position.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::model::{forward, head_contribution, HookSite, Model, SiteKind};
use crate::patch::{patch_total_capturing, PatchSpec};
use crate::prompt::{Category, PromptPair};
use crate::scalar::Scalar;

/// Attention head address, rendered `H{layer}^{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}^{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad head id `{s}`, expected H<layer>^<head>"));
        let rest = s.strip_prefix('H').ok_or_else(bad)?;
        let (l, h) = rest.split_once('^').ok_or_else(bad)?;
        Ok(Self { layer: l.parse().map_err(|_| bad())?, head: h.parse().map_err(|_| bad())? })
    }
}

impl Serialize for HeadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which norm scales the attention weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VwWeighting {
    /// ‖v_src‖ before the output projection.
    #[default]
    ValueNorm,
    /// ‖v_src · W_O[head]‖, the norm of what the head would write.
    ProjectedNorm,
}

fn norm_f64<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.wide() * x.wide()).sum::<f64>().sqrt()
}

/// `a(dest→src) · ‖v_src‖` from a cache holding the head's `attn_pattern`
/// and `value_vectors`.
pub fn value_weighted_attention<T: Scalar>(
    cache: &ActivationCache<T>,
    layer: usize,
    head: usize,
    dest: usize,
    src: usize,
) -> Result<f64> {
    let row = cache.require(HookSite::attn_pattern(layer, head), dest)?;
    let a = row.get(src).ok_or_else(|| Error::Input(format!("source position {src} out of range")))?.wide();
    let v = cache.require(HookSite::value_vectors(layer, head), src)?;
    Ok(a * norm_f64(v))
}

/// Like [`value_weighted_attention`] with the chosen weighting.
pub fn value_weighted_attention_with<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    head: HeadId,
    dest: usize,
    src: usize,
    weighting: VwWeighting,
) -> Result<f64> {
    match weighting {
        VwWeighting::ValueNorm => value_weighted_attention(cache, head.layer, head.head, dest, src),
        VwWeighting::ProjectedNorm => {
            let row = cache.require(HookSite::attn_pattern(head.layer, head.head), dest)?;
            let a = row.get(src).ok_or_else(|| Error::Input(format!("source position {src} out of range")))?.wide();
            let v = cache.require(HookSite::value_vectors(head.layer, head.head), src)?;
            let projected = head_contribution(model, head.layer, head.head, v)?;
            Ok(a * norm_f64(&projected))
        }
    }
}

/// Sites needed to evaluate value-weighted attention for `heads`.
pub fn lens_sites(heads: &[HeadId]) -> BTreeSet<HookSite> {
    heads
        .iter()
        .flat_map(|h| [HookSite::attn_pattern(h.layer, h.head), HookSite::value_vectors(h.layer, h.head)])
        .collect()
}

/// Value-weighted attention from the final position to `src` for each head,
/// from a plain forward over `tokens`.
pub fn final_position_vw<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    src: usize,
    heads: &[HeadId],
    weighting: VwWeighting,
) -> Result<BTreeMap<HeadId, f64>> {
    let out = forward(model, tokens, &lens_sites(heads))?;
    let dest = tokens.len() - 1;
    heads.iter().map(|&h| Ok((h, value_weighted_attention_with(model, &out.cache, h, dest, src, weighting)?))).collect()
}

/// Each value minus the mean over the map.
pub fn relative_vw_profile(per_identity: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    if per_identity.len() < 2 {
        return Err(Error::Input(format!(
            "relative profile needs at least two identities, got {}",
            per_identity.len()
        )));
    }
    let mean = per_identity.values().sum::<f64>() / per_identity.len() as f64;
    Ok(per_identity.iter().map(|(k, v)| (k.clone(), v - mean)).collect())
}

/// One head's value-weighted attention to the identity position, across
/// identities, for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttentionProfile {
    pub head: HeadId,
    pub question_id: String,
    pub per_identity_vw: BTreeMap<String, f64>,
    pub relative_vw: BTreeMap<String, f64>,
}

impl HeadAttentionProfile {
    pub fn new(head: HeadId, question_id: &str, per_identity_vw: BTreeMap<String, f64>) -> Result<Self> {
        let relative_vw = relative_vw_profile(&per_identity_vw)?;
        Ok(Self { head, question_id: question_id.to_string(), per_identity_vw, relative_vw })
    }
}

/// How per-question judgements are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Tag when more than half the questions tag.
    #[default]
    Majority,
    /// Tag on the question-averaged relative profile.
    Mean,
}

fn tags_for(
    relative: &BTreeMap<String, f64>,
    categories: &BTreeMap<String, Category>,
    margin: f64,
) -> Result<BTreeSet<Category>> {
    let mut by_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
    for (id, v) in relative {
        let c = categories.get(id).ok_or_else(|| Error::Input(format!("identity `{id}` has no category")))?;
        by_cat.entry(*c).or_default().push(*v);
    }
    let mut tags = BTreeSet::new();
    for (c, vals) in &by_cat {
        let others: Vec<f64> = by_cat.iter().filter(|(k, _)| *k != c).flat_map(|(_, v)| v.iter().copied()).collect();
        if others.is_empty() {
            continue;
        }
        let inside = vals.iter().sum::<f64>() / vals.len() as f64;
        let outside = others.iter().sum::<f64>() / others.len() as f64;
        if inside - outside >= margin {
            tags.insert(*c);
        }
    }
    Ok(tags)
}

/// Tags each head with the identity categories it attends to
/// disproportionately: category mean minus the mean over all other
/// identities must reach `margin`.
pub fn categorize_heads(
    profiles: &[HeadAttentionProfile],
    categories: &BTreeMap<String, Category>,
    margin: f64,
    aggregation: Aggregation,
) -> Result<BTreeMap<HeadId, BTreeSet<Category>>> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Config(format!("categorization margin must be positive, got {margin}")));
    }
    let mut by_head: BTreeMap<HeadId, Vec<&HeadAttentionProfile>> = BTreeMap::new();
    for p in profiles {
        by_head.entry(p.head).or_default().push(p);
    }
    let mut out = BTreeMap::new();
    for (head, ps) in by_head {
        let tags = match aggregation {
            Aggregation::Majority => {
                let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
                for p in &ps {
                    for c in tags_for(&p.relative_vw, categories, margin)? {
                        *counts.entry(c).or_default() += 1;
                    }
                }
                counts.into_iter().filter(|&(_, n)| 2 * n > ps.len()).map(|(c, _)| c).collect()
            }
            Aggregation::Mean => {
                let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for p in &ps {
                    for (id, v) in &p.relative_vw {
                        let e = sums.entry(id.clone()).or_default();
                        e.0 += v;
                        e.1 += 1;
                    }
                }
                let avg = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
                tags_for(&avg, categories, margin)?
            }
        };
        out.insert(head, tags);
    }
    Ok(out)
}

/// Picks the `k_pos` heads with the largest positive mean Δ_r and the
/// `k_neg` with the most negative. Ties resolve by head id.
pub fn select_heads(mean_delta: &BTreeMap<HeadId, f64>, k_pos: usize, k_neg: usize) -> (Vec<HeadId>, Vec<HeadId>) {
    let mut pos: Vec<(HeadId, f64)> = mean_delta.iter().filter(|(_, &v)| v > 0.0).map(|(h, v)| (*h, *v)).collect();
    pos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut neg: Vec<(HeadId, f64)> = mean_delta.iter().filter(|(_, &v)| v < 0.0).map(|(h, v)| (*h, *v)).collect();
    neg.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    (pos.into_iter().take(k_pos).map(|(h, _)| h).collect(), neg.into_iter().take(k_neg).map(|(h, _)| h).collect())
}

/// Runs the total-effect patch while watching `heads`, and returns their
/// value-weighted attention from the final position to the identity
/// position of the patched (corrupt) run.
pub fn attention_after_patching<T: Scalar>(
    model: &Model<T>,
    pair: &PromptPair,
    cache: &ActivationCache<T>,
    spec: &PatchSpec,
    heads: &[HeadId],
    weighting: VwWeighting,
) -> Result<BTreeMap<HeadId, f64>> {
    // embed precedes every layer
    let top =
        spec.sites.iter().map(|s| if s.kind == SiteKind::Embed { -1 } else { s.layer as i64 }).max().unwrap_or(-1);
    for h in heads {
        if h.layer as i64 <= top {
            return Err(Error::Config(format!(
                "{h} is not above the patched layer {top}; no causal path from the patch"
            )));
        }
    }
    let out =
        patch_total_capturing(model, &pair.corrupt_tokens, cache, spec, &pair.diff_positions, &lens_sites(heads))?;
    let dest = pair.corrupt_tokens.len() - 1;
    heads
        .iter()
        .map(|&h| {
            Ok((h, value_weighted_attention_with(model, &out.cache, h, dest, pair.identity_position, weighting)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rope::RopeParams;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            n_kv_heads: 1,
            head_dim: 4,
            d_ff: 4,
            vocab_size: 8,
            rope: RopeParams::new(10_000.0, 4).unwrap(),
            norm_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    fn cache_with(pattern: Vec<f64>, values: Vec<Vec<f64>>) -> ActivationCache<f64> {
        let n = pattern.len();
        let c = cfg();
        let mut cache = ActivationCache::new(n, "x".into());
        cache.insert(&c, HookSite::attn_pattern(0, 0), n - 1, pattern).unwrap();
        for (s, v) in values.into_iter().enumerate() {
            cache.insert(&c, HookSite::value_vectors(0, 0), s, v).unwrap();
        }
        cache
    }

    #[test]
    fn vw_examples() {
        let cache = cache_with(vec![0.0, 1.0], vec![vec![9.0, 9.0, 9.0, 9.0], vec![0.0, 0.0, 3.0, 4.0]]);
        assert_eq!(value_weighted_attention(&cache, 0, 0, 1, 0).unwrap(), 0.0);
        assert!((value_weighted_attention(&cache, 0, 0, 1, 1).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(value_weighted_attention(&cache, 0, 0, 0, 0), Err(Error::CacheMiss(_))));

        let unit = vec![0.5, 0.5, 0.5, 0.5];
        let cache = cache_with(vec![0.25; 4], vec![unit; 4]);
        for s in 0..4 {
            assert!((value_weighted_attention(&cache, 0, 0, 3, s).unwrap() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn head_id_format() {
        let h = HeadId::new(13, 14);
        assert_eq!(h.to_string(), "H13^14");
        assert_eq!("H13^14".parse::<HeadId>().unwrap(), h);
        assert!("13^14".parse::<HeadId>().is_err());
    }

    fn map(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn relative_examples() {
        let r = relative_vw_profile(&map(&[("a", 2.0), ("b", 2.0), ("c", 2.0)])).unwrap();
        assert!(r.values().all(|&v| v == 0.0));
        let r = relative_vw_profile(&map(&[("x", 3.0), ("y", 1.0)])).unwrap();
        assert_eq!(r, map(&[("x", 1.0), ("y", -1.0)]));
        assert!(relative_vw_profile(&BTreeMap::new()).is_err());
    }

    fn table1() -> BTreeMap<String, Category> {
        let reg = crate::fixtures::identities();
        reg.personas().map(|i| (i.surface.clone(), i.category)).collect()
    }

    fn profile(vw: BTreeMap<String, f64>, q: &str) -> HeadAttentionProfile {
        HeadAttentionProfile::new(HeadId::new(1, 0), q, vw).unwrap()
    }

    #[test]
    fn constructed_racial_head() {
        let cats = table1();
        let m = 0.3;
        let vw = cats.iter().map(|(k, c)| (k.clone(), if *c == Category::Racial { m } else { -m / 3.0 })).collect();
        let tags = categorize_heads(&[profile(vw, "q")], &cats, 0.05, Aggregation::Majority).unwrap();
        assert_eq!(tags[&HeadId::new(1, 0)], BTreeSet::from([Category::Racial]));

        let zeros = cats.keys().map(|k| (k.clone(), 0.0)).collect();
        let tags = categorize_heads(&[profile(zeros, "q")], &cats, 0.05, Aggregation::Mean).unwrap();
        assert!(tags[&HeadId::new(1, 0)].is_empty());
    }

    #[test]
    fn majority_needs_more_than_half() {
        let cats = table1();
        let racial: BTreeMap<String, f64> =
            cats.iter().map(|(k, c)| (k.clone(), if *c == Category::Racial { 1.0 } else { 0.0 })).collect();
        let flat: BTreeMap<String, f64> = cats.keys().map(|k| (k.clone(), 0.5)).collect();
        let ps = [profile(racial.clone(), "a"), profile(flat.clone(), "b")];
        let tags = categorize_heads(&ps, &cats, 0.05, Aggregation::Majority).unwrap();
        assert!(tags[&HeadId::new(1, 0)].is_empty());
        let ps = [profile(racial.clone(), "a"), profile(racial, "b"), profile(flat, "c")];
        let tags = categorize_heads(&ps, &cats, 0.05, Aggregation::Majority).unwrap();
        assert_eq!(tags[&HeadId::new(1, 0)], BTreeSet::from([Category::Racial]));
    }

    #[test]
    fn categorize_errors() {
        let cats = table1();
        let p = profile(map(&[("Martian", 1.0), ("Asian", 0.0)]), "q");
        assert!(matches!(
            categorize_heads(std::slice::from_ref(&p), &cats, 0.05, Aggregation::Majority),
            Err(Error::Input(_))
        ));
        assert!(matches!(categorize_heads(&[p], &cats, 0.0, Aggregation::Majority), Err(Error::Config(_))));
    }

    #[test]
    fn head_selection() {
        let m: BTreeMap<HeadId, f64> = [
            (HeadId::new(0, 0), 0.5),
            (HeadId::new(0, 1), -0.2),
            (HeadId::new(1, 0), 0.9),
            (HeadId::new(1, 1), -0.7),
            (HeadId::new(1, 2), 0.5),
        ]
        .into();
        let (p, n) = select_heads(&m, 2, 4);
        assert_eq!(p, vec![HeadId::new(1, 0), HeadId::new(0, 0)]);
        assert_eq!(n, vec![HeadId::new(1, 1), HeadId::new(0, 1)]);
    }

    proptest! {
        #[test]
        fn centering_properties(vals in prop::collection::vec(-5.0f64..5.0, 16), shift in -3.0f64..3.0) {
            let m: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("i{i}"), *v)).collect();
            let r = relative_vw_profile(&m).unwrap();
            prop_assert!(r.values().sum::<f64>().abs() < 1e-6);
            let rr = relative_vw_profile(&r).unwrap();
            for (a, b) in r.values().zip(rr.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let shifted: BTreeMap<String, f64> = m.iter().map(|(k, v)| (k.clone(), v + shift)).collect();
            let rs = relative_vw_profile(&shifted).unwrap();
            for (a, b) in r.values().zip(rs.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn categorize_shift_invariant(vals in prop::collection::vec(0.0f64..2.0, 16), shift in 0.0f64..5.0) {
            let cats = table1();
            let base: BTreeMap<String, f64> = cats.keys().cloned().zip(vals.iter().copied()).collect();
            let shifted = base.iter().map(|(k, v)| (k.clone(), v + shift)).collect();
            let a = categorize_heads(&[profile(base, "q")], &cats, 0.05, Aggregation::Majority).unwrap();
            let b = categorize_heads(&[profile(shifted, "q")], &cats, 0.05, Aggregation::Majority).unwrap();
            // float rounding of the shift can only matter within ~1e-15 of the margin
            prop_assert_eq!(a, b);
        }
    }
}
