use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Pre-tokenization pattern of the Llama 3 tokenizer, used when the file
/// does not carry its own.
const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

/// Byte-level BPE tokenizer read from a `tokenizer.json`-style file.
#[derive(Debug)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    /// Added tokens, longest first.
    specials: Vec<(String, u32)>,
    pattern: Regex,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

/// GPT-2 reversible byte → printable-char table.
fn byte_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            char::from(b)
        } else {
            n += 1;
            char::from_u32(255 + n).expect("valid code point")
        };
    }
    table
}

fn find_pattern(v: &Value) -> Option<&str> {
    match v {
        Value::Object(m) => {
            if let Some(p) = m.get("pattern").and_then(|p| p.get("Regex")).and_then(Value::as_str) {
                return Some(p);
            }
            m.values().find_map(find_pattern)
        }
        Value::Array(a) => a.iter().find_map(find_pattern),
        _ => None,
    }
}

impl BpeTokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    /// Reads `model.vocab`, `model.merges` (either `"a b"` strings or
    /// `[a, b]` pairs), `added_tokens` and an optional split regex.
    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |m: &str| Error::Tokenization(format!("tokenizer file: {m}"));
        let model = v.get("model").ok_or_else(|| bad("no `model` section"))?;
        let vocab = model.get("vocab").and_then(Value::as_object).ok_or_else(|| bad("no `model.vocab` object"))?;
        let mut encoder = HashMap::with_capacity(vocab.len());
        for (tok, id) in vocab {
            let id = id.as_u64().ok_or_else(|| bad("non-integer vocab id"))? as u32;
            encoder.insert(tok.clone(), id);
        }
        let merges = model.get("merges").and_then(Value::as_array).ok_or_else(|| bad("no `model.merges` array"))?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, m) in merges.iter().enumerate() {
            let pair = match m {
                Value::String(s) => s.split_once(' ').map(|(a, b)| (a.to_string(), b.to_string())),
                Value::Array(a) if a.len() == 2 => {
                    a[0].as_str().zip(a[1].as_str()).map(|(x, y)| (x.to_string(), y.to_string()))
                }
                _ => None,
            }
            .ok_or_else(|| bad("malformed merge entry"))?;
            ranks.entry(pair).or_insert(rank);
        }
        let mut specials = Vec::new();
        if let Some(added) = v.get("added_tokens").and_then(Value::as_array) {
            for a in added {
                let content = a.get("content").and_then(Value::as_str);
                let id = a.get("id").and_then(Value::as_u64);
                if let (Some(c), Some(id)) = (content, id) {
                    encoder.insert(c.to_string(), id as u32);
                    specials.push((c.to_string(), id as u32));
                }
            }
        }
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let pattern_src = v.get("pre_tokenizer").and_then(find_pattern).unwrap_or(LLAMA3_PATTERN);
        let pattern = Regex::new(pattern_src).map_err(|e| bad(&format!("bad split regex: {e}")))?;
        let byte_to_char = byte_table();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let decoder = encoder.iter().map(|(k, &v)| (v, k.clone())).collect();
        Ok(Self { encoder, decoder, ranks, specials, pattern, byte_to_char, char_to_byte })
    }

    fn bpe(&self, word: &str, out: &mut Vec<u32>) -> Result<()> {
        let mut parts: Vec<String> = word.bytes().map(|b| self.byte_to_char[b as usize].to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts.splice(i..i + 2, [merged]);
        }
        for p in parts {
            let id =
                self.encoder.get(&p).ok_or_else(|| Error::Tokenization(format!("piece {p:?} not in vocabulary")))?;
            out.push(*id);
        }
        Ok(())
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<u32>) -> Result<()> {
        for m in self.pattern.find_iter(text) {
            let m = m.map_err(|e| Error::Tokenization(format!("regex failure: {e}")))?;
            self.bpe(m.as_str(), out)?;
        }
        Ok(())
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            // earliest special token occurrence, longest on ties
            let mut hit: Option<(usize, &str, u32)> = None;
            for (s, id) in &self.specials {
                if let Some(pos) = rest.find(s.as_str()) {
                    if hit.is_none_or(|(p, _, _)| pos < p) {
                        hit = Some((pos, s, *id));
                    }
                }
            }
            match hit {
                Some((pos, s, id)) => {
                    self.encode_plain(&rest[..pos], &mut out)?;
                    out.push(id);
                    rest = &rest[pos + s.len()..];
                }
                None => {
                    self.encode_plain(rest, &mut out)?;
                    break 'outer;
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok =
                self.decoder.get(&id).ok_or_else(|| Error::Tokenization(format!("token id {id} out of range")))?;
            if self.specials.iter().any(|(_, s)| *s == id) {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                let b = self
                    .char_to_byte
                    .get(&c)
                    .ok_or_else(|| Error::Tokenization(format!("non byte-level char {c:?}")))?;
                bytes.push(*b);
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Tokenization(format!("invalid UTF-8: {e}")))
    }

    fn vocab_size(&self) -> usize {
        self.decoder.keys().max().map_or(0, |&m| m as usize + 1)
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        if let Some(id) = self.encoder.get(token) {
            return Some(*id);
        }
        let mapped: String = token.bytes().map(|b| self.byte_to_char[b as usize]).collect();
        self.encoder.get(&mapped).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    /// Tiny vocabulary: bytes of "a", "b", " ", "c" plus merges "Ġ a"→"Ġa",
    /// "a b"→"ab", "Ġa b"→"Ġab" (in rank order).
    fn tiny() -> BpeTokenizer {
        BpeTokenizer::from_json(&json!({
            "added_tokens": [{"id": 7, "content": "<|eot_id|>", "special": true}],
            "model": {
                "type": "BPE",
                "vocab": {"a": 0, "b": 1, "Ġ": 2, "c": 3, "ab": 4, "Ġa": 5, "Ġab": 6},
                "merges": [["Ġ", "a"], "a b", "Ġa b"]
            }
        }))
        .unwrap()
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = tiny();
        assert_eq!(t.encode("ab").unwrap(), vec![4]);
        assert_eq!(t.encode("ab ab c").unwrap(), vec![4, 6, 2, 3]);
        assert_eq!(t.encode("abc<|eot_id|>ab").unwrap(), vec![4, 3, 7, 4]);
    }

    #[test]
    fn round_trip_and_lookup() {
        let t = tiny();
        for s in ["ab ab c", "", "c<|eot_id|> a"] {
            assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
        }
        assert_eq!(t.token_id(" ab"), Some(6));
        assert_eq!(t.vocab_size(), 8);
    }

    #[test]
    fn missing_piece_is_an_error() {
        assert!(matches!(tiny().encode("z"), Err(Error::Tokenization(_))));
    }
}
