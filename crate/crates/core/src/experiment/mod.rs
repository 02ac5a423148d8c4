//! Orchestration of the evaluation, patching and attention procedures over
//! a question corpus, with persistence of their results.

mod attention;
mod eval;
mod partition;
mod records;
mod sweep;

use std::collections::BTreeSet;

pub use attention::{
    run_attention_after_patching, run_attention_profiles, sample_per_subject, AttentionProfileOutput, ProfileConfig,
};
pub use eval::{
    evaluate_flags, flags_by_question, run_persona_eval, EvalConfig, EvalOutput, EvalSummary, GroupComparison,
    GroupTest, IdentitySummary, ProbVariant,
};
pub use partition::{partition_subsets, PairPartition, SubsetPartition};
pub use records::{
    metric_records_to_csv, read_jsonl, write_json, write_jsonl, EvalRecord, MetricRecord, PatchedAttentionRecord,
    ProfileRecord, ATTN_OUT_VARIANT, SCHEMA_VERSION, SCORING,
};
pub use sweep::{run_patching_sweep, summarize_sweep, SweepConfig, SweepOutcome, SweepSummary, Target, TargetSummary};

use crate::corpus::QuestionRecord;
use crate::error::Result;
use crate::metrics::OptionLogits;
use crate::model::{run, LogitsScope, Model, PatchMap};
use crate::prompt::{make_pair, render_prompt, AnswerTokens, Identity, PromptPair, Template};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Everything needed to turn (identity, question) into model outputs.
#[derive(Clone, Copy)]
pub struct Harness<'a, T> {
    pub model: &'a Model<T>,
    pub tokenizer: &'a dyn Tokenizer,
    pub template: &'a Template,
    pub answers: AnswerTokens,
}

impl<'a, T: Scalar> Harness<'a, T> {
    pub fn new(model: &'a Model<T>, tokenizer: &'a dyn Tokenizer, template: &'a Template) -> Result<Self> {
        let answers = AnswerTokens::resolve(tokenizer, AnswerTokens::DEFAULT_TEXT)?;
        Ok(Self { model, tokenizer, template, answers })
    }

    /// Token ids of the rendered prompt and the identity token's position.
    pub fn prompt(&self, identity: &Identity, q: &QuestionRecord) -> Result<(Vec<u32>, usize)> {
        let tokens = self.tokenizer.encode(&render_prompt(identity, q, self.template))?;
        let pos = self.tokenizer.encode(self.template.prefix_before_identity(identity, q).trim_end_matches(' '))?.len();
        Ok((tokens, pos))
    }

    /// Unpatched last-position logits.
    pub fn last_logits(&self, tokens: &[u32]) -> Result<Vec<T>> {
        let out = run(self.model, tokens, &BTreeSet::new(), &PatchMap::new(), LogitsScope::Last)?;
        Ok(out.logits.into_data())
    }

    pub fn options(&self, logits: &[T], q: &QuestionRecord) -> Result<OptionLogits> {
        OptionLogits::from_vocab(logits, self.answers.0, q.answer)
    }

    pub fn pair(&self, id1: &Identity, id2: &Identity, q: &QuestionRecord) -> Result<PromptPair> {
        make_pair(id1, id2, q, self.template, self.tokenizer, self.answers)
    }
}
