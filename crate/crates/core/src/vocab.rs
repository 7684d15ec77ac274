//! Token vocabulary with fixed reserved ids.
//!
//! Ids 0..=3 are reserved: `<pad>`=0, `<unk>`=1, `<bos>`=2, `<eos>`=3.
//! Vocabulary files list one token per line in rank order, reserved tokens
//! first, so a file round-trips byte-for-byte.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from non-reserved tokens in rank order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for token in tokens {
            let token = token.into();
            if token_to_id.contains_key(&token) {
                return Err(Error::data(format!("duplicate vocabulary token {token:?}")));
            }
            token_to_id.insert(token.clone(), id_to_token.len());
            id_to_token.push(token);
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    /// Count the most frequent tokens on a corpus side and keep the top
    /// `cap`, breaking frequency ties by first occurrence. Returns the
    /// vocabulary plus the fraction of running-token occurrences it covers.
    pub fn build(sentences: &[Vec<String>], cap: usize) -> Result<(Self, f64)> {
        if cap < 1 {
            return Err(Error::data("vocabulary cap must be >= 1"));
        }
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // token -> (count, first pos)
        let mut total = 0usize;
        let mut position = 0usize;
        for sentence in sentences {
            for token in sentence {
                total += 1;
                let entry = counts.entry(token.as_str()).or_insert((0, position));
                entry.0 += 1;
                position += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            counts.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let kept: Vec<String> = ranked
            .iter()
            .take(cap)
            .map(|(t, _, _)| t.to_string())
            .collect();
        let covered: usize = ranked.iter().take(cap).map(|(_, c, _)| c).sum();
        let vocab = Vocabulary::from_tokens(kept)?;
        Ok((vocab, covered as f64 / total as f64))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token id, mapping out-of-vocabulary tokens to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Encode a sentence, appending `<eos>` when asked.
    pub fn encode(&self, tokens: &[String], append_eos: bool) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(t)).collect();
        if append_eos {
            ids.push(EOS);
        }
        ids
    }

    /// Decode ids back to tokens, stopping before `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.id_to_token[id].clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for token in &self.id_to_token {
            out.push_str(token);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(Error::data(format!("vocabulary file {path:?} too short")));
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if lines[i] != *reserved {
                return Err(Error::data(format!(
                    "vocabulary file {path:?} line {i} must be {reserved:?}, found {:?}",
                    lines[i]
                )));
            }
        }
        Vocabulary::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.split_whitespace().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["x"]).unwrap();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocabulary::from_tokens(["x"]).unwrap();
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn full_cap_covers_everything() {
        let (_, coverage) = Vocabulary::build(&sents(&["a b c", "a b"]), 10).unwrap();
        assert_eq!(coverage, 1.0);
    }

    #[test]
    fn cap_one_on_aab() {
        let (v, coverage) = Vocabulary::build(&sents(&["a a b"]), 1).unwrap();
        assert!(v.contains("a") && !v.contains("b"));
        assert!((coverage - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        let (v, _) = Vocabulary::build(&sents(&["b a b a"]), 1).unwrap();
        assert!(v.contains("b") && !v.contains("a"));
    }

    #[test]
    fn file_round_trip_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (v, _) = Vocabulary::build(&sents(&["c a b a c c"]), 2).unwrap();
        let p1 = dir.path().join("v1.txt");
        let p2 = dir.path().join("v2.txt");
        v.save(&p1).unwrap();
        v.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let loaded = Vocabulary::load(&p1).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("c"), v.id("c"));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocabulary::build(&sents(&[]), 3).is_err());
    }
}
