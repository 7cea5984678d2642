//! Word-level vocabulary with reserved marker ids.
//!
//! Dialogue encoding leans on four fixed ids: unknown word, the two
//! speaker markers, and end-of-utterance. They occupy the first slots of
//! every vocabulary so encoded corpora stay valid across vocab rebuilds
//! with the same text.

use std::collections::BTreeMap;

use crate::{PktError, Result};

pub const UNK: usize = 0;
pub const S1: usize = 1;
pub const S2: usize = 2;
pub const EOU: usize = 3;
pub const RESERVED: [&str; 4] = ["<unk>", "<s1>", "<s2>", "<eou>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from raw text. Words are counted after whitespace splitting,
    /// kept by descending count with ties broken alphabetically, and
    /// capped at `max_size` including the four reserved slots.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, max_size: usize) -> Result<Vocab> {
        if max_size < RESERVED.len() + 1 {
            return Err(PktError::Config(format!(
                "vocab size {max_size} leaves no room beyond the {} reserved ids",
                RESERVED.len()
            )));
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                if RESERVED.contains(&word) {
                    continue;
                }
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut words: Vec<String> = RESERVED.iter().map(|w| w.to_string()).collect();
        words.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        Vocab::from_words(words)
    }

    /// Rebuild from a serialized word list. The reserved ids must be in
    /// their fixed slots.
    pub fn from_words(words: Vec<String>) -> Result<Vocab> {
        if words.len() < RESERVED.len() {
            return Err(PktError::Data(format!(
                "vocabulary with {} entries is missing reserved ids",
                words.len()
            )));
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if words[i] != *expect {
                return Err(PktError::Data(format!(
                    "vocabulary slot {i} is '{}', expected '{expect}'",
                    words[i]
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(PktError::Data(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }
}
