//! Word-level tokenizer with a corpus-built vocabulary.
//!
//! Text is lowercased and split into alphanumeric runs; every other
//! non-whitespace character becomes its own single-character token.

use crate::error::{NestError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
/// First id available for vocabulary words.
pub const NUM_SPECIAL: u32 = 3;

pub fn is_special(token: u32) -> bool {
    token < NUM_SPECIAL
}

/// Split text into lowercase word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build the vocabulary from raw document texts. Words are id'd by
    /// descending corpus frequency with alphabetical tie-breaks, so a given
    /// corpus always produces the same tokenizer.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for w in split_words(text.as_ref()) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut pairs: Vec<(String, u64)> = freq.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words: Vec<String> = pairs.into_iter().map(|(w, _)| w).collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIAL + i as u32))
            .collect();
        Self { words, index }
    }

    /// Total vocabulary size including the three special ids.
    pub fn vocab_size(&self) -> u32 {
        NUM_SPECIAL + self.words.len() as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Render token ids back to text. Special ids are skipped; words are
    /// joined with single spaces.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut parts = Vec::new();
        for &t in tokens {
            if is_special(t) {
                continue;
            }
            match self.words.get((t - NUM_SPECIAL) as usize) {
                Some(w) => parts.push(w.as_str()),
                None => parts.push("<invalid>"),
            }
        }
        parts.join(" ")
    }

    pub fn token_str(&self, token: u32) -> Option<&str> {
        if is_special(token) {
            return None;
        }
        self.words.get((token - NUM_SPECIAL) as usize).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let raw: Tokenizer = serde_json::from_reader(std::io::BufReader::new(file))?;
        if raw.words.len() as u64 + NUM_SPECIAL as u64 > u32::MAX as u64 {
            return Err(NestError::format("vocabulary too large"));
        }
        Ok(Self::from_words(raw.words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(
            split_words("Hello, world! It's 2-fold."),
            vec!["hello", ",", "world", "!", "it", "'", "s", "2", "-", "fold", "."]
        );
    }

    #[test]
    fn encode_decode_round_trips_in_vocab() {
        let tok = Tokenizer::build(["the cat sat on the mat ."]);
        let ids = tok.encode("the cat sat .");
        assert!(ids.iter().all(|&t| t != UNK));
        let text = tok.decode(&ids);
        assert_eq!(tok.encode(&text), ids);
    }

    #[test]
    fn oov_maps_to_unk() {
        let tok = Tokenizer::build(["a b c"]);
        assert_eq!(tok.encode("a zebra"), vec![tok.encode("a")[0], UNK]);
    }

    #[test]
    fn ids_are_frequency_ordered_deterministically() {
        let tok = Tokenizer::build(["b b a a c"]);
        // a and b tie at frequency 2 -> alphabetical; c follows.
        assert_eq!(tok.words(), &["a".to_string(), "b".to_string(), "c".to_string()]);
        let again = Tokenizer::build(["b b a a c"]);
        assert_eq!(tok.words(), again.words());
    }

    #[test]
    fn save_load_preserves_encoding() {
        let tok = Tokenizer::build(["x y z y"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.encode("x y z"), tok.encode("x y z"));
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
    }
}
