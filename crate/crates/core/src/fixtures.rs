//! Bundled toy fixtures: question corpus, identity list, identity pairs and
//! prompt template. Everything needed for hermetic runs ships in the binary.

use std::path::Path;

use crate::corpus::{parse_jsonl, QuestionRecord};
use crate::prompt::{render_prompt, AnswerTokens, IdentityPair, IdentityRegistry, Template};
use crate::tokenizer::WordTokenizer;

pub const TEMPLATE: &str = include_str!("../fixtures/template.txt");
pub const IDENTITIES: &str = include_str!("../fixtures/identities.json");
pub const PAIRS: &str = include_str!("../fixtures/pairs.json");
pub const CORPUS: &str = include_str!("../fixtures/toy_corpus.jsonl");

pub fn corpus() -> Vec<QuestionRecord> {
    parse_jsonl(CORPUS, Path::new("toy_corpus.jsonl")).expect("bundled corpus parses")
}

pub fn template() -> Template {
    Template::parse(TEMPLATE).expect("bundled template parses")
}

pub fn identities() -> IdentityRegistry {
    IdentityRegistry::parse_unchecked(IDENTITIES).expect("bundled identities parse")
}

pub fn pairs() -> Vec<IdentityPair> {
    IdentityPair::parse_list(PAIRS).expect("bundled pairs parse")
}

/// Closed word-level vocabulary covering every prompt the inputs can
/// render, plus the answer-letter tokens.
pub fn build_word_tokenizer(
    corpus: &[QuestionRecord],
    identities: &IdentityRegistry,
    template: &Template,
) -> WordTokenizer {
    let mut texts: Vec<String> = Vec::with_capacity(corpus.len() * identities.all().len());
    for q in corpus {
        for id in identities.all() {
            texts.push(render_prompt(id, q, template));
        }
    }
    texts.extend(template.literal_text().map(str::to_string));
    WordTokenizer::from_texts(texts.iter().map(String::as_str).chain(AnswerTokens::DEFAULT_TEXT))
}

pub fn bundled_tokenizer() -> WordTokenizer {
    build_word_tokenizer(&corpus(), &identities(), &template())
}
