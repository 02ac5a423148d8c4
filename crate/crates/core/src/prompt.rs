//! Persona prompts: identity registry, template rendering, and clean/corrupt
//! pairs built by symmetric token replacement.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::QuestionRecord;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const BASE_SURFACE: &str = "helpful";
pub const PERSONA_SUBJECT: &str = "student";
pub const BASE_SUBJECT: &str = "assistant";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Racial,
    Color,
    Positive,
    Negative,
    Base,
}

impl Category {
    pub const PERSONAS: [Category; 4] = [Self::Racial, Self::Color, Self::Positive, Self::Negative];

    pub fn name(self) -> &'static str {
        match self {
            Self::Racial => "racial",
            Self::Color => "color",
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Base => "base",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Article {
    A,
    An,
}

impl Article {
    /// "an" iff the first letter is a vowel (AEIOU, case-insensitive).
    pub fn for_word(word: &str) -> Self {
        match word.chars().next().map(|c| c.to_ascii_lowercase()) {
            Some('a' | 'e' | 'i' | 'o' | 'u') => Self::An,
            _ => Self::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::An => "an",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Identity {
    pub surface: String,
    pub category: Category,
    pub article: Article,
}

#[derive(Deserialize)]
struct IdentityFile {
    surface: String,
    category: Category,
    #[serde(default)]
    article: Option<Article>,
}

impl Identity {
    pub fn new(surface: &str, category: Category) -> Self {
        Self { surface: surface.to_string(), category, article: Article::for_word(surface) }
    }

    pub fn base() -> Self {
        Self::new(BASE_SURFACE, Category::Base)
    }

    pub fn is_base(&self) -> bool {
        self.category == Category::Base
    }

    /// The `{identity_2}` word paired with this identity.
    pub fn subject(&self) -> &'static str {
        if self.is_base() {
            BASE_SUBJECT
        } else {
            PERSONA_SUBJECT
        }
    }

    /// Errors unless the identity is one token in prompt context (with its
    /// leading space). The base identity is exempt.
    pub fn check_single_token(&self, tokenizer: &dyn Tokenizer) -> Result<()> {
        if self.is_base() {
            return Ok(());
        }
        let n = tokenizer
            .encode(&format!(" {}", self.surface))
            .map_err(|e| Error::Identity(format!("`{}`: {e}", self.surface)))?
            .len();
        if n != 1 {
            return Err(Error::Identity(format!(
                "`{}` tokenizes to {n} tokens; identities must be a single token",
                self.surface
            )));
        }
        Ok(())
    }
}

/// Ordered identity set. Always contains the base identity.
#[derive(Debug, Clone)]
pub struct IdentityRegistry {
    identities: Vec<Identity>,
}

impl IdentityRegistry {
    /// Parses the identities file without tokenizer validation (used when
    /// the vocabulary is being built from these very identities).
    pub fn parse_unchecked(json: &str) -> Result<Self> {
        let raw: Vec<IdentityFile> = serde_json::from_str(json)?;
        let mut identities: Vec<Identity> = Vec::with_capacity(raw.len() + 1);
        for r in raw {
            if identities.iter().any(|i| i.surface == r.surface) {
                return Err(Error::Identity(format!("duplicate identity `{}`", r.surface)));
            }
            if r.category == Category::Base && r.surface != BASE_SURFACE {
                return Err(Error::Identity(format!(
                    "base category is reserved for `{BASE_SURFACE}`, got `{}`",
                    r.surface
                )));
            }
            identities.push(Identity {
                article: r.article.unwrap_or_else(|| Article::for_word(&r.surface)),
                surface: r.surface,
                category: r.category,
            });
        }
        if !identities.iter().any(Identity::is_base) {
            identities.insert(0, Identity::base());
        }
        Ok(Self { identities })
    }

    /// Parses and rejects any persona that is not a single token.
    pub fn parse(json: &str, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let reg = Self::parse_unchecked(json)?;
        for i in &reg.identities {
            i.check_single_token(tokenizer)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, tokenizer)
    }

    pub fn all(&self) -> &[Identity] {
        &self.identities
    }

    pub fn personas(&self) -> impl Iterator<Item = &Identity> {
        self.identities.iter().filter(|i| !i.is_base())
    }

    pub fn base(&self) -> &Identity {
        self.identities.iter().find(|i| i.is_base()).expect("base is always registered")
    }

    pub fn get(&self, surface: &str) -> Result<&Identity> {
        self.identities
            .iter()
            .find(|i| i.surface == surface)
            .ok_or_else(|| Error::Identity(format!("unknown identity `{surface}`")))
    }
}

/// One entry of the pairs file. `id1` provides the clean prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityPair {
    pub id1: String,
    pub id2: String,
}

impl IdentityPair {
    pub fn new(id1: &str, id2: &str) -> Self {
        Self { id1: id1.to_string(), id2: id2.to_string() }
    }

    pub fn parse_list(json: &str) -> Result<Vec<Self>> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn label(&self) -> String {
        format!("{},{}", self.id1, self.id2)
    }
}

const PLACEHOLDERS: [&str; 8] =
    ["helper", "identity_1", "identity_2", "question", "option_A", "option_B", "option_C", "option_D"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(usize),
}

/// Prompt template with `{helper}`, `{identity_1}`, `{identity_2}`,
/// `{question}` and `{option_A}`..`{option_D}`, each exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut seen = [0usize; PLACEHOLDERS.len()];
        let mut rest = text;
        let mut literal = String::new();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let slot = after
                .find('}')
                .and_then(|close| PLACEHOLDERS.iter().position(|p| *p == &after[..close]).map(|i| (i, close)));
            match slot {
                Some((i, close)) => {
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(i));
                    seen[i] += 1;
                    rest = &after[close + 1..];
                }
                None => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Text(literal));
        }
        for (name, count) in PLACEHOLDERS.iter().zip(seen) {
            if count != 1 {
                return Err(Error::Template(format!(
                    "placeholder {{{name}}} appears {count} times, expected exactly once"
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn values<'a>(identity: &'a Identity, q: &'a QuestionRecord) -> [&'a str; 8] {
        [
            identity.article.as_str(),
            &identity.surface,
            identity.subject(),
            &q.question,
            &q.options[0],
            &q.options[1],
            &q.options[2],
            &q.options[3],
        ]
    }

    /// Rendered text up to (not including) `{identity_1}`. The separating
    /// space belongs to the identity token.
    pub fn prefix_before_identity(&self, identity: &Identity, q: &QuestionRecord) -> String {
        let values = Self::values(identity, q);
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(1) => break,
                Segment::Slot(i) => out.push_str(values[*i]),
            }
        }
        out
    }

    /// Literal text of the template outside its placeholders.
    pub fn literal_text(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Text(t) => Some(t.as_str()),
            Segment::Slot(_) => None,
        })
    }
}

/// Substitutes every placeholder once. Substituted text is never rescanned.
pub fn render_prompt(identity: &Identity, question: &QuestionRecord, template: &Template) -> String {
    let values = Template::values(identity, question);
    let mut out = String::new();
    for s in &template.segments {
        match s {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot(i) => out.push_str(values[*i]),
        }
    }
    out
}

/// Token ids of the four answer letters as the model would emit them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokens(pub [u32; 4]);

impl AnswerTokens {
    pub const DEFAULT_TEXT: [&'static str; 4] = [" A", " B", " C", " D"];

    pub fn resolve(tokenizer: &dyn Tokenizer, texts: [&str; 4]) -> Result<Self> {
        let mut ids = [0u32; 4];
        for (slot, t) in ids.iter_mut().zip(texts) {
            let enc = tokenizer.encode(t)?;
            match enc.as_slice() {
                [id] => *slot = *id,
                _ => {
                    return Err(Error::Tokenization(format!(
                        "answer option {t:?} is {} tokens, expected one",
                        enc.len()
                    )))
                }
            }
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if ids[i] == ids[j] {
                    return Err(Error::Input("answer option tokens must be distinct".into()));
                }
            }
        }
        Ok(Self(ids))
    }
}

/// Clean (ID1) and corrupt (ID2) token sequences of one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub question_id: String,
    pub id1: String,
    pub id2: String,
    pub clean_tokens: Vec<u32>,
    pub corrupt_tokens: Vec<u32>,
    /// Positions where the two sequences differ, ascending.
    pub diff_positions: Vec<usize>,
    /// Position of the `{identity_1}` token.
    pub identity_position: usize,
    pub option_token_ids: [u32; 4],
    pub correct_option: usize,
}

impl PromptPair {
    pub fn len(&self) -> usize {
        self.clean_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_tokens.is_empty()
    }
}

/// Renders both prompts and aligns them token by token.
pub fn make_pair(
    id1: &Identity,
    id2: &Identity,
    question: &QuestionRecord,
    template: &Template,
    tokenizer: &dyn Tokenizer,
    answers: AnswerTokens,
) -> Result<PromptPair> {
    id1.check_single_token(tokenizer)?;
    id2.check_single_token(tokenizer)?;
    question.validate()?;
    let clean = tokenizer.encode(&render_prompt(id1, question, template))?;
    let corrupt = tokenizer.encode(&render_prompt(id2, question, template))?;
    if clean.len() != corrupt.len() {
        return Err(Error::Pairing(format!(
            "`{}` and `{}` prompts for question {} have {} vs {} tokens",
            id1.surface,
            id2.surface,
            question.id,
            clean.len(),
            corrupt.len()
        )));
    }
    let diff_positions: Vec<usize> = (0..clean.len()).filter(|&i| clean[i] != corrupt[i]).collect();
    let identity_position =
        tokenizer.encode(template.prefix_before_identity(id1, question).trim_end_matches(' '))?.len();
    if identity_position >= clean.len()
        || (!diff_positions.is_empty() && id1.surface != id2.surface && !diff_positions.contains(&identity_position))
    {
        return Err(Error::Pairing(format!(
            "identity token of `{}` does not sit at an aligned differing position",
            id1.surface
        )));
    }
    Ok(PromptPair {
        question_id: question.id.clone(),
        id1: id1.surface.clone(),
        id2: id2.surface.clone(),
        clean_tokens: clean,
        corrupt_tokens: corrupt,
        diff_positions,
        identity_position,
        option_token_ids: answers.0,
        correct_option: question.answer,
    })
}
