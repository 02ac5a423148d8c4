//! Persona evaluation: unpatched answer probabilities and accuracy per
//! identity, compared against the base identity and across groups.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{EvalRecord, SCHEMA_VERSION, SCORING};
use super::Harness;
use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, correct_answer_prob, correct_answer_prob_renormalized, is_max, mean, t_test, TTest, TestKind,
};
use crate::prompt::{Category, IdentityRegistry};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbVariant {
    /// Softmax over the whole vocabulary.
    #[default]
    FullVocab,
    /// Softmax over the four option logits only.
    Renormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub name: String,
    pub a: Category,
    pub b: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub test: TestKind,
    pub prob: ProbVariant,
    pub groups: Vec<GroupComparison>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test: TestKind::Paired,
            prob: ProbVariant::FullVocab,
            groups: vec![
                GroupComparison { name: "positive_vs_negative".into(), a: Category::Positive, b: Category::Negative },
                GroupComparison { name: "racial_vs_color".into(), a: Category::Racial, b: Category::Color },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub identity: String,
    pub category: Category,
    pub mean_prob: f64,
    pub accuracy: f64,
    /// Mean over questions of (identity prob − base prob).
    pub prob_delta_vs_base: f64,
    pub accuracy_delta_vs_base: f64,
    /// Identity vs. base over questions; absent when degenerate.
    pub test_vs_base: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTest {
    pub name: String,
    pub a: Category,
    pub b: Category,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: Option<TTest>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub test: TestKind,
    pub prob: ProbVariant,
    pub scoring: String,
    pub n_questions: usize,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub metadata: EvalMetadata,
    pub identities: Vec<IdentitySummary>,
    /// `pairwise[a][b]` = mean prob of `a` minus mean prob of `b`.
    pub pairwise_prob_delta: BTreeMap<String, BTreeMap<String, f64>>,
    pub group_tests: Vec<GroupTest>,
}

pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

/// Evaluates every identity (base included) on every question.
pub fn run_persona_eval<T: Scalar>(
    h: &Harness<'_, T>,
    corpus: &[QuestionRecord],
    identities: &IdentityRegistry,
    config: &EvalConfig,
) -> Result<EvalOutput> {
    if corpus.is_empty() {
        return Err(Error::Input("no questions to evaluate".into()));
    }
    for id in identities.all() {
        id.check_single_token(h.tokenizer)?;
    }
    let cells: Vec<(usize, usize)> =
        (0..identities.all().len()).flat_map(|i| (0..corpus.len()).map(move |q| (i, q))).collect();
    let records = cells
        .par_iter()
        .map(|&(i, qi)| {
            let id = &identities.all()[i];
            let q = &corpus[qi];
            let (tokens, _) = h.prompt(id, q)?;
            let logits = h.last_logits(&tokens)?;
            let opts = h.options(&logits, q)?;
            let prob = match config.prob {
                ProbVariant::FullVocab => correct_answer_prob(&logits, h.answers.0, q.answer)?,
                ProbVariant::Renormalized => correct_answer_prob_renormalized(&logits, h.answers.0, q.answer)?,
            };
            Ok(EvalRecord {
                schema_version: SCHEMA_VERSION,
                identity: id.surface.clone(),
                category: id.category.name().to_string(),
                question_id: q.id.clone(),
                subject: q.subject.clone(),
                prob,
                is_max: is_max(&opts),
                logits: opts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records, corpus.len(), identities, config, h.model.fingerprint())?;
    Ok(EvalOutput { records, summary })
}

fn column<'r>(records: &'r [EvalRecord], identity: &str) -> Vec<&'r EvalRecord> {
    records.iter().filter(|r| r.identity == identity).collect()
}

fn summarize(
    records: &[EvalRecord],
    n_questions: usize,
    identities: &IdentityRegistry,
    config: &EvalConfig,
    fingerprint: &str,
) -> Result<EvalSummary> {
    let base = column(records, &identities.base().surface);
    let base_prob: Vec<f64> = base.iter().map(|r| r.prob).collect();
    let base_acc = accuracy(&base.iter().map(|r| r.is_max).collect::<Vec<_>>());

    let mut probs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut summaries = Vec::new();
    for id in identities.all() {
        let col = column(records, &id.surface);
        let p: Vec<f64> = col.iter().map(|r| r.prob).collect();
        let deltas: Vec<f64> = p.iter().zip(&base_prob).map(|(a, b)| a - b).collect();
        let acc = accuracy(&col.iter().map(|r| r.is_max).collect::<Vec<_>>());
        let test_vs_base = if id.is_base() { None } else { t_test(config.test, &p, &base_prob).ok() };
        summaries.push(IdentitySummary {
            identity: id.surface.clone(),
            category: id.category,
            mean_prob: mean(&p),
            accuracy: acc,
            prob_delta_vs_base: mean(&deltas),
            accuracy_delta_vs_base: acc - base_acc,
            test_vs_base,
        });
        probs.insert(id.surface.clone(), p);
    }

    let mut pairwise = BTreeMap::new();
    for a in &summaries {
        let row: BTreeMap<String, f64> =
            summaries.iter().map(|b| (b.identity.clone(), a.mean_prob - b.mean_prob)).collect();
        pairwise.insert(a.identity.clone(), row);
    }

    let group_mean = |cat: Category| -> Vec<f64> {
        let members: Vec<&Vec<f64>> =
            identities.personas().filter(|i| i.category == cat).map(|i| &probs[&i.surface]).collect();
        (0..n_questions)
            .map(|q| {
                if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|m| m[q]).sum::<f64>() / members.len() as f64
                }
            })
            .collect()
    };
    let group_tests = config
        .groups
        .iter()
        .map(|g| {
            let (xa, xb) = (group_mean(g.a), group_mean(g.b));
            let (test, note) = match t_test(config.test, &xa, &xb) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            GroupTest { name: g.name.clone(), a: g.a, b: g.b, mean_a: mean(&xa), mean_b: mean(&xb), test, note }
        })
        .collect();

    Ok(EvalSummary {
        schema_version: SCHEMA_VERSION,
        metadata: EvalMetadata {
            test: config.test,
            prob: config.prob,
            scoring: SCORING.to_string(),
            n_questions,
            model_fingerprint: fingerprint.to_string(),
        },
        identities: summaries,
        pairwise_prob_delta: pairwise,
        group_tests,
    })
}

/// Per-question is-max flags of one identity.
pub fn flags_by_question(records: &[EvalRecord], identity: &str) -> BTreeMap<String, bool> {
    records.iter().filter(|r| r.identity == identity).map(|r| (r.question_id.clone(), r.is_max)).collect()
}

/// Unpatched is-max flag of `identity` on every question.
pub fn evaluate_flags<T: Scalar>(
    h: &Harness<'_, T>,
    identity: &crate::prompt::Identity,
    questions: &[QuestionRecord],
) -> Result<BTreeMap<String, bool>> {
    questions
        .par_iter()
        .map(|q| {
            let (tokens, _) = h.prompt(identity, q)?;
            let logits = h.last_logits(&tokens)?;
            Ok((q.id.clone(), is_max(&h.options(&logits, q)?)))
        })
        .collect()
}
