//! Identity-position attention profiles and their response to patching.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{PatchedAttentionRecord, ProfileRecord, SCHEMA_VERSION};
use super::Harness;
use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::lens::{
    attention_after_patching, categorize_heads, final_position_vw, lens_sites, Aggregation, HeadAttentionProfile,
    HeadId, VwWeighting,
};
use crate::model::HookSite;
use crate::patch::{capture, PatchMode, PatchSpec, PositionScope};
use crate::prompt::{Category, Identity, IdentityRegistry};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub margin: f64,
    pub aggregation: Aggregation,
    pub weighting: VwWeighting,
    /// All heads when `None`.
    pub heads: Option<Vec<HeadId>>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { margin: 0.05, aggregation: Aggregation::Majority, weighting: VwWeighting::ValueNorm, heads: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfileOutput {
    pub profiles: Vec<ProfileRecord>,
    pub categories: BTreeMap<HeadId, BTreeSet<Category>>,
}

/// The first `k` questions of each subject, in corpus order.
pub fn sample_per_subject(corpus: &[QuestionRecord], k: usize) -> Vec<QuestionRecord> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    corpus
        .iter()
        .filter(|q| {
            let n = seen.entry(q.subject.as_str()).or_default();
            *n += 1;
            *n <= k
        })
        .cloned()
        .collect()
}

fn all_heads(n_layers: usize, n_heads: usize) -> Vec<HeadId> {
    (0..n_layers).flat_map(|l| (0..n_heads).map(move |h| HeadId::new(l, h))).collect()
}

/// Value-weighted attention from the final position to the identity token,
/// for every persona identity, then per-head categorization.
pub fn run_attention_profiles<T: Scalar>(
    h: &Harness<'_, T>,
    questions: &[QuestionRecord],
    identities: &IdentityRegistry,
    config: &ProfileConfig,
) -> Result<AttentionProfileOutput> {
    let mcfg = h.model.config();
    let heads = config.heads.clone().unwrap_or_else(|| all_heads(mcfg.n_layers, mcfg.n_heads));
    let personas: Vec<&Identity> = identities.personas().collect();
    let per_question: Vec<Vec<HeadAttentionProfile>> = questions
        .par_iter()
        .map(|q| {
            let mut by_head: BTreeMap<HeadId, BTreeMap<String, f64>> = BTreeMap::new();
            for id in &personas {
                let (tokens, pos) = h.prompt(id, q)?;
                for (head, vw) in final_position_vw(h.model, &tokens, pos, &heads, config.weighting)? {
                    by_head.entry(head).or_default().insert(id.surface.clone(), vw);
                }
            }
            by_head.into_iter().map(|(head, vw)| HeadAttentionProfile::new(head, &q.id, vw)).collect()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<HeadAttentionProfile> = per_question.into_iter().flatten().collect();
    let cats: BTreeMap<String, Category> = personas.iter().map(|i| (i.surface.clone(), i.category)).collect();
    let categories = categorize_heads(&flat, &cats, config.margin, config.aggregation)?;
    let profiles = flat
        .into_iter()
        .map(|p| ProfileRecord {
            schema_version: SCHEMA_VERSION,
            head: p.head,
            question_id: p.question_id,
            per_identity_vw: p.per_identity_vw,
            relative_vw: p.relative_vw,
        })
        .collect();
    Ok(AttentionProfileOutput { profiles, categories })
}

/// For each MLP layer below the top, patches it and records how every head
/// in later layers changes its attention to the identity position.
pub fn run_attention_after_patching<T: Scalar>(
    h: &Harness<'_, T>,
    id1: &Identity,
    id2: &Identity,
    questions: &[QuestionRecord],
    positions: PositionScope,
    heads: Option<&[HeadId]>,
    weighting: VwWeighting,
) -> Result<Vec<PatchedAttentionRecord>> {
    let mcfg = h.model.config();
    if mcfg.n_layers < 2 {
        return Err(Error::Config("attention after patching needs at least two layers".into()));
    }
    let candidates: Vec<HeadId> = match heads {
        Some(hs) => hs.to_vec(),
        None => all_heads(mcfg.n_layers, mcfg.n_heads),
    };
    let per_question: Vec<Vec<PatchedAttentionRecord>> = questions
        .par_iter()
        .map(|q| {
            let pair = h.pair(id1, id2, q)?;
            let dest = pair.clean_tokens.len() - 1;
            let src = pair.identity_position;
            let mut out = Vec::new();
            for layer in 0..mcfg.n_layers - 1 {
                let above: Vec<HeadId> = candidates.iter().copied().filter(|hd| hd.layer > layer).collect();
                if above.is_empty() {
                    continue;
                }
                let site = HookSite::mlp_out(layer);
                let mut sites = lens_sites(&above);
                sites.insert(site);
                let clean = capture(h.model, &pair.clean_tokens, &sites)?;
                let corrupt = capture(h.model, &pair.corrupt_tokens, &lens_sites(&above))?;
                let spec = PatchSpec::new(site, positions.clone(), PatchMode::Total);
                let patched = attention_after_patching(h.model, &pair, &clean, &spec, &above, weighting)?;
                for hd in above {
                    let vw = |c| crate::lens::value_weighted_attention_with(h.model, c, hd, dest, src, weighting);
                    out.push(PatchedAttentionRecord {
                        schema_version: SCHEMA_VERSION,
                        question_id: q.id.clone(),
                        id1: id1.surface.clone(),
                        id2: id2.surface.clone(),
                        site: site.to_string(),
                        positions: positions.label(),
                        head: hd,
                        vw_clean: vw(&clean)?,
                        vw_corrupt: vw(&corrupt)?,
                        vw_patched: patched[&hd],
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_question.into_iter().flatten().collect())
}
