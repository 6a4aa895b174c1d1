//! Whitespace + lowercase word tokenizer with a fixed vocabulary.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use crate::digest;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOT_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eot>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

impl Tokenizer {
    /// Builds a vocabulary from every word of `texts`; ids are assigned in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            set.extend(split_words(t));
        }
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Word ids of `text` without the end-of-text marker. Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn digest(&self) -> String {
        digest::of_json(&self.words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_strips_punctuation() {
        let tok = Tokenizer::from_texts(["A video of Brushing teeth."]);
        assert_eq!(tok.vocab_size(), 3 + 5);
        let ids = tok.encode("a VIDEO of brushing, teeth");
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|&i| i > EOT_ID));
        assert_eq!(tok.encode("unseen"), vec![UNK_ID]);
    }

    #[test]
    fn ids_are_order_independent() {
        let a = Tokenizer::from_texts(["b a", "c"]);
        let b = Tokenizer::from_texts(["c a b"]);
        assert_eq!(a.words(), b.words());
        assert_eq!(a.digest(), b.digest());
    }
}
