use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::corpus::Post;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Lowercases and splits on whitespace; every character that is not
/// alphanumeric, `_` or `'` becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' || ch == '\'' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Word-level vocabulary. Ids 0..4 are the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_tokens(r.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Keeps tokens seen at least `min_count` times, most frequent first with
    /// lexicographic tie-break, capped at `max_tokens` non-reserved entries.
    pub fn build(corpus: &[Post], min_count: usize, max_tokens: usize) -> Result<Self> {
        Self::build_from_texts(
            corpus.iter().map(|p| p.text.as_str()),
            min_count,
            max_tokens,
        )
    }

    pub fn build_from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_tokens);

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .iter()
                .take(max_len.saturating_sub(1))
                .map(|t| self.id(t)),
        );
        let real = ids.len();
        ids.resize(max_len.max(1), PAD);
        let mask = (0..ids.len()).map(|i| i < real).collect();
        TokenSequence { ids, mask }
    }

    /// Content tokens of `seq` (no CLS, no padding).
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.content_positions()
            .map(|i| self.token(seq.ids[i]).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// Fixed-length id sequence with a leading CLS and a real-token mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding real, non-CLS tokens.
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.ids.len()).filter(|&i| self.mask[i] && self.ids[i] != PAD)
    }

    pub fn content_len(&self) -> usize {
        self.content_positions().count()
    }

    /// Same content re-padded (or truncated) to `len`.
    pub fn with_len(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.resize(len, PAD);
        mask.resize(len, false);
        TokenSequence { ids, mask }
    }

    pub fn is_well_formed(&self) -> bool {
        !self.ids.is_empty()
            && self.ids.len() == self.mask.len()
            && self.ids[0] == CLS
            && self.mask[0]
            && self
                .ids
                .iter()
                .zip(&self.mask)
                .all(|(&id, &m)| m == (id != PAD))
            && self.mask.windows(2).all(|w| w[0] || !w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_folds_case() {
        assert_eq!(
            tokenize("Hello, World!  #Parody"),
            ["hello", ",", "world", "!", "#", "parody"]
        );
        assert_eq!(tokenize("don't"), ["don't"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocab::build_from_texts(["a a b"], 2, 100).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocab::build(&[], 1, 10).is_err());
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::build_from_texts(["[mask] x"], 1, 10).unwrap();
        for (i, s) in RESERVED.iter().enumerate() {
            assert_eq!(v.token(i), Some(*s));
        }
    }

    #[test]
    fn encode_edge_cases() {
        let v = Vocab::build_from_texts(["hello there"], 1, 10).unwrap();
        let e = v.encode("", 5);
        assert_eq!(e.ids, vec![CLS, PAD, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![true, false, false, false, false]);

        let e = v.encode("Hello hello", 5);
        assert_eq!(e.ids[1], e.ids[2]);
        assert_ne!(e.ids[1], UNK);

        let e = v.encode("hello there hello there hello", 3);
        assert_eq!(e.len(), 3);
        assert_eq!(e.mask, vec![true, true, true]);

        let e = v.encode("unseen", 4);
        assert_eq!(e.ids[1], UNK);
        assert!(e.is_well_formed());
    }

    #[test]
    fn vocab_serde_round_trip_keeps_lookup() {
        let v = Vocab::build_from_texts(["b a a c"], 1, 10).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("a"), v.id("a"));
    }
}
