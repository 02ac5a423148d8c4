//! Layer, head and identity-position patching sweeps over a question subset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{MetricRecord, ATTN_OUT_VARIANT, SCHEMA_VERSION, SCORING};
use super::Harness;
use crate::cache::ActivationCache;
use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::metrics::{is_max, relative_logit_diff, OptionLogits};
use crate::model::{HookSite, ModelConfig};
use crate::patch::{capture, patch_direct_from, patch_total, PatchMode, PatchSpec, PositionScope};
use crate::prompt::{Identity, PromptPair};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Each layer's MLP output at every position.
    MlpLayers,
    /// Each layer's attention output at every position.
    MhaLayers,
    /// Each head's output at every position.
    Heads,
    /// Each layer's MLP output at the identity positions only.
    MlpIdentityPosition,
}

impl Target {
    pub const ALL: [Target; 4] = [Self::MlpLayers, Self::MhaLayers, Self::Heads, Self::MlpIdentityPosition];

    pub fn name(self) -> &'static str {
        match self {
            Self::MlpLayers => "mlp_layers",
            Self::MhaLayers => "mha_layers",
            Self::Heads => "heads",
            Self::MlpIdentityPosition => "mlp_identity_position",
        }
    }

    /// The single-site patches this target expands to.
    pub fn cells(self, config: &ModelConfig) -> Vec<(HookSite, PositionScope)> {
        let layers = 0..config.n_layers;
        match self {
            Self::MlpLayers => layers.map(|l| (HookSite::mlp_out(l), PositionScope::All)).collect(),
            Self::MhaLayers => layers.map(|l| (HookSite::attn_out(l), PositionScope::All)).collect(),
            Self::Heads => layers
                .flat_map(|l| (0..config.n_heads).map(move |h| (HookSite::head_out(l, h), PositionScope::All)))
                .collect(),
            Self::MlpIdentityPosition => layers.map(|l| (HookSite::mlp_out(l), PositionScope::IdentityOnly)).collect(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Usage(format!("unknown sweep target `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub targets: Vec<Target>,
    /// Also emit direct-effect records.
    pub direct: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { targets: vec![Target::MlpLayers, Target::MhaLayers], direct: false }
    }
}

pub struct SweepOutcome {
    /// Existing and new records, sorted.
    pub records: Vec<MetricRecord>,
    pub computed: usize,
    pub skipped: usize,
}

type CellKey = (String, String, String, String, String, PatchMode, String);

fn key(r: &MetricRecord) -> CellKey {
    (r.question_id.clone(), r.id1.clone(), r.id2.clone(), r.target.clone(), r.site.clone(), r.mode, r.positions.clone())
}

struct Prepared<T> {
    pair: PromptPair,
    clean: ActivationCache<T>,
    corrupt: ActivationCache<T>,
    clean_opts: OptionLogits,
    corrupt_opts: OptionLogits,
}

/// Runs every target cell for every question, skipping cells already in
/// `existing`. Output is sorted by question, pair, target and site so it
/// does not depend on scheduling.
pub fn run_patching_sweep<T: Scalar>(
    h: &Harness<'_, T>,
    id1: &Identity,
    id2: &Identity,
    questions: &[QuestionRecord],
    config: &SweepConfig,
    existing: Vec<MetricRecord>,
) -> Result<SweepOutcome> {
    let mcfg = h.model.config();
    let mut cells: Vec<(Target, HookSite, PositionScope, PatchMode)> = Vec::new();
    for &t in &config.targets {
        for (site, pos) in t.cells(mcfg) {
            cells.push((t, site, pos.clone(), PatchMode::Total));
            if config.direct {
                cells.push((t, site, pos, PatchMode::Direct));
            }
        }
    }
    let sites: BTreeSet<HookSite> = cells.iter().map(|c| c.1).collect();
    let mut corrupt_sites = sites.clone();
    corrupt_sites.insert(HookSite::resid_final());

    let done: BTreeSet<CellKey> = existing.iter().map(key).collect();
    let todo: Vec<(usize, usize)> = questions
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| {
            let done = &done;
            cells.iter().enumerate().filter_map(move |(ci, (t, site, pos, mode))| {
                let k = (
                    q.id.clone(),
                    id1.surface.clone(),
                    id2.surface.clone(),
                    t.name().to_string(),
                    site.to_string(),
                    *mode,
                    pos.label(),
                );
                (!done.contains(&k)).then_some((qi, ci))
            })
        })
        .collect();
    let needed: BTreeSet<usize> = todo.iter().map(|c| c.0).collect();

    let prepared: BTreeMap<usize, Prepared<T>> = needed
        .par_iter()
        .map(|&qi| {
            let q = &questions[qi];
            let pair = h.pair(id1, id2, q)?;
            let clean = capture(h.model, &pair.clean_tokens, &sites)?;
            let corrupt = capture(h.model, &pair.corrupt_tokens, &corrupt_sites)?;
            let clean_opts = h.options(clean.last_logits().expect("capture records logits"), q)?;
            let corrupt_opts = h.options(corrupt.last_logits().expect("capture records logits"), q)?;
            Ok((qi, Prepared { pair, clean, corrupt, clean_opts, corrupt_opts }))
        })
        .collect::<Result<_>>()?;

    let fresh: Vec<MetricRecord> = todo
        .par_iter()
        .map(|&(qi, ci)| {
            let q = &questions[qi];
            let p = &prepared[&qi];
            let (target, site, pos, mode) = &cells[ci];
            let spec = PatchSpec::new(*site, pos.clone(), *mode);
            let logits = match mode {
                PatchMode::Total => {
                    patch_total(h.model, &p.pair.corrupt_tokens, &p.clean, &spec, &p.pair.diff_positions)?
                }
                PatchMode::Direct => patch_direct_from(h.model, &p.clean, &p.corrupt, &spec, &p.pair.diff_positions)?,
            };
            let patched = h.options(&logits, q)?;
            Ok(MetricRecord {
                schema_version: SCHEMA_VERSION,
                question_id: q.id.clone(),
                id1: id1.surface.clone(),
                id2: id2.surface.clone(),
                target: target.name().to_string(),
                site: site.to_string(),
                positions: pos.label(),
                mode: *mode,
                delta_r: relative_logit_diff(&patched, &p.corrupt_opts)?,
                is_max: is_max(&patched),
                patched,
                corrupt: p.corrupt_opts,
                clean: p.clean_opts,
            })
        })
        .collect::<Result<_>>()?;

    let computed = fresh.len();
    let skipped = questions.len() * cells.len() - computed;
    let mut records = existing;
    records.extend(fresh);
    records.sort_by_key(key);
    records.dedup_by(|a, b| key(a) == key(b));
    Ok(SweepOutcome { records, computed, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub id1: String,
    pub id2: String,
    pub target: String,
    pub site: String,
    pub positions: String,
    pub mode: PatchMode,
    pub n: usize,
    pub mean_delta_r: f64,
    /// Percentage of questions where the correct option is the maximum
    /// after patching.
    pub is_max_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub attn_out_variant: String,
    pub scoring: String,
    pub targets: Vec<TargetSummary>,
}

type CellGroup = (String, String, String, String, PatchMode, String);

/// Per-(pair, target, site, mode) means, in record order.
pub fn summarize_sweep(records: &[MetricRecord]) -> SweepSummary {
    let mut groups: BTreeMap<CellGroup, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.id1.clone(), r.id2.clone(), r.target.clone(), r.site.clone(), r.mode, r.positions.clone()))
            .or_default()
            .push(r);
    }
    let targets = groups
        .into_iter()
        .map(|((id1, id2, target, site, mode, positions), rs)| {
            let n = rs.len();
            TargetSummary {
                id1,
                id2,
                target,
                site,
                positions,
                mode,
                n,
                mean_delta_r: rs.iter().map(|r| r.delta_r).sum::<f64>() / n as f64,
                is_max_pct: 100.0 * rs.iter().filter(|r| r.is_max).count() as f64 / n as f64,
            }
        })
        .collect();
    SweepSummary {
        schema_version: SCHEMA_VERSION,
        attn_out_variant: ATTN_OUT_VARIANT.to_string(),
        scoring: SCORING.to_string(),
        targets,
    }
}
