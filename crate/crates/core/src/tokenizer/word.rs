use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Word-level tokenizer with an exact round trip.
///
/// Pieces are: chat special tokens `<|name|>`; alphanumeric runs or single
/// punctuation characters, each optionally carrying one leading space; and
/// runs of other whitespace.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

fn special_len(s: &str) -> Option<usize> {
    let rest = s.strip_prefix("<|")?;
    let end = rest.find("|>")?;
    let name = &rest[..end];
    (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')).then_some(end + 4)
}

/// Byte length of the unit starting at `s` (non-empty, not whitespace).
fn unit_len(s: &str) -> usize {
    if let Some(n) = special_len(s) {
        return n;
    }
    let mut chars = s.char_indices();
    let (_, c0) = chars.next().expect("non-empty");
    if c0.is_alphanumeric() {
        s.char_indices().find(|(_, c)| !c.is_alphanumeric()).map_or(s.len(), |(i, _)| i)
    } else {
        c0.len_utf8()
    }
}

/// Splits `text` into pieces whose concatenation is `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("in bounds");
        if c.is_whitespace() {
            let run = rest.char_indices().find(|(_, c)| !c.is_whitespace()).map_or(rest.len(), |(j, _)| j);
            let after = &rest[run..];
            let attachable = !after.is_empty() && special_len(after).is_none();
            if attachable && rest[..run].ends_with(' ') {
                if run > 1 {
                    out.push(&rest[..run - 1]);
                }
                let n = 1 + unit_len(after);
                out.push(&text[i + run - 1..i + run - 1 + n]);
                i += run - 1 + n;
            } else {
                out.push(&rest[..run]);
                i += run;
            }
        } else {
            let n = unit_len(rest);
            out.push(&rest[..n]);
            i += n;
        }
    }
    out
}

impl WordTokenizer {
    /// Ids are assigned in sorted order of the pieces, so the result is
    /// independent of text order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces = BTreeSet::new();
        for t in texts {
            pieces.extend(pretokenize(t).into_iter().map(str::to_string));
        }
        Self::from_vocab(pieces.into_iter().collect()).expect("pieces are unique")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Tokenization(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        pretokenize(text)
            .into_iter()
            .map(|p| self.index.get(p).copied().ok_or_else(|| Error::Tokenization(format!("unknown symbol {p:?}"))))
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let w = self
                .vocab
                .get(id as usize)
                .ok_or_else(|| Error::Tokenization(format!("token id {id} out of range")))?;
            s.push_str(w);
        }
        Ok(s)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pieces() {
        assert_eq!(
            pretokenize("You are an Asian student.\n\nA. x"),
            vec!["You", " are", " an", " Asian", " student", ".", "\n\n", "A", ".", " x"]
        );
        assert_eq!(
            pretokenize("<|eot_id|><|start_header_id|>user<|end_header_id|>\n\nHi  there"),
            vec!["<|eot_id|>", "<|start_header_id|>", "user", "<|end_header_id|>", "\n\n", "Hi", " ", " there"]
        );
        assert_eq!(pretokenize(" <|x|> "), vec![" ", "<|x|>", " "]);
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        let t = WordTokenizer::from_texts(["a b"]);
        assert!(t.encode("").unwrap().is_empty());
    }

    #[test]
    fn unknown_symbol_errors() {
        let t = WordTokenizer::from_texts(["the cat"]);
        assert!(matches!(t.encode("the dog"), Err(Error::Tokenization(_))));
        assert!(matches!(t.decode(&[99]), Err(Error::Tokenization(_))));
    }

    #[test]
    fn one_word_change_changes_one_id() {
        let a = "You are a good student. Answer now.";
        let b = "You are a bad student. Answer now.";
        let t = WordTokenizer::from_texts([a, b]);
        let (ia, ib) = (t.encode(a).unwrap(), t.encode(b).unwrap());
        assert_eq!(ia.len(), ib.len());
        let diffs: Vec<usize> = (0..ia.len()).filter(|&i| ia[i] != ib[i]).collect();
        assert_eq!(diffs, vec![3]);
        assert_eq!(t.decode(&ia[3..4]).unwrap(), " good");
    }

    proptest! {
        #[test]
        fn round_trip(text in "[ a-zA-Z0-9.,?!\n\t<|>_-]{0,80}") {
            let t = WordTokenizer::from_texts([text.as_str()]);
            let ids = t.encode(&text).unwrap();
            prop_assert_eq!(t.decode(&ids).unwrap(), text);
        }
    }
}
