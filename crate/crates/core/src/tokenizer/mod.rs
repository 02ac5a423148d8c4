//! Pluggable tokenization.
//!
//! [`WordTokenizer`] is a closed-vocabulary word-level tokenizer built from
//! the corpus; [`BpeTokenizer`] reads a byte-level BPE `tokenizer.json`
//! (vocab + merges) for real checkpoints.

mod bpe;
mod word;

pub use bpe::BpeTokenizer;
pub use word::WordTokenizer;

use crate::error::Result;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    fn decode(&self, ids: &[u32]) -> Result<String>;
    fn vocab_size(&self) -> usize;
    /// Id of an exact vocabulary entry.
    fn token_id(&self, token: &str) -> Option<u32>;
}
