//! Persisted result rows. Every line of a results JSONL file is one record;
//! `schema_version` bumps whenever a field changes meaning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::HeadId;
use crate::metrics::{relative_logit_diff, OptionLogits};
use crate::patch::PatchMode;

pub const SCHEMA_VERSION: u32 = 1;

/// What a patched `attn_out` site means in these results.
pub const ATTN_OUT_VARIANT: &str = "post_projection";
/// How a question counts as answered correctly.
pub const SCORING: &str = "is_max over the four option logits";

/// Outcome of one patch target on one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub question_id: String,
    pub id1: String,
    pub id2: String,
    /// Sweep family, e.g. `mlp_layers`.
    pub target: String,
    /// Hook site label, e.g. `mlp_out.1` or `head_out.0.3`.
    pub site: String,
    pub positions: String,
    pub mode: PatchMode,
    pub delta_r: f64,
    pub is_max: bool,
    pub patched: OptionLogits,
    pub corrupt: OptionLogits,
    pub clean: OptionLogits,
}

impl MetricRecord {
    /// Recomputes `delta_r` from the stored logits.
    pub fn rederive(&self) -> Result<f64> {
        relative_logit_diff(&self.patched, &self.corrupt)
    }

    pub fn sort_key(&self) -> (String, String, String, PatchMode, String) {
        (self.question_id.clone(), self.target.clone(), self.site.clone(), self.mode, self.positions.clone())
    }

    /// Layer of the patched site, if it names one.
    pub fn layer(&self) -> Option<usize> {
        self.site.split('.').nth(1)?.parse().ok()
    }

    pub fn head(&self) -> Option<usize> {
        self.site.split('.').nth(2)?.parse().ok()
    }
}

/// Unpatched answer statistics for one identity on one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub identity: String,
    pub category: String,
    pub question_id: String,
    pub subject: String,
    pub prob: f64,
    pub is_max: bool,
    pub logits: OptionLogits,
}

/// Value-weighted attention of one head for one question, per identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub schema_version: u32,
    pub head: HeadId,
    pub question_id: String,
    pub per_identity_vw: BTreeMap<String, f64>,
    pub relative_vw: BTreeMap<String, f64>,
}

/// Attention of a downstream head to the identity position before and
/// after a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchedAttentionRecord {
    pub schema_version: u32,
    pub question_id: String,
    pub id1: String,
    pub id2: String,
    pub site: String,
    pub positions: String,
    pub head: HeadId,
    pub vw_clean: f64,
    pub vw_corrupt: f64,
    pub vw_patched: f64,
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Flattens metric records to CSV, one row per record.
pub fn metric_records_to_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
    w.write_record([
        "question_id",
        "id1",
        "id2",
        "target",
        "site",
        "positions",
        "mode",
        "delta_r",
        "is_max",
        "patched_correct",
        "corrupt_correct",
        "clean_correct",
    ])
    .map_err(|e| Error::Input(e.to_string()))?;
    for r in records {
        w.write_record([
            r.question_id.clone(),
            r.id1.clone(),
            r.id2.clone(),
            r.target.clone(),
            r.site.clone(),
            r.positions.clone(),
            r.mode.to_string(),
            r.delta_r.to_string(),
            r.is_max.to_string(),
            r.patched.correct_logit().to_string(),
            r.corrupt.correct_logit().to_string(),
            r.clean.correct_logit().to_string(),
        ])
        .map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
