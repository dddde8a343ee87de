//! Closed word-level vocabulary for the synthetic captions.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: u16 = 0;
pub const BOS_ID: u16 = 1;
pub const EOT_ID: u16 = 2;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange",
];

/// One synonym per color, used by sub-description sampling.
pub const COLOR_SYNONYMS: [&str; 8] = [
    "crimson", "emerald", "azure", "golden", "fuchsia", "teal", "ivory", "amber",
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const QUADRANTS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

const FILLER: [&str; 6] = ["a", "photo", "of", "in", "the", "and"];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u16>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eot>".into()];
        words.extend(FILLER.iter().map(|s| s.to_string()));
        words.extend(COLORS.iter().map(|s| s.to_string()));
        words.extend(COLOR_SYNONYMS.iter().map(|s| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(QUADRANTS.iter().map(|s| s.to_string()));
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u16))
            .collect();
        Vocab { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<u16> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Data(format!("word not in vocabulary: {word}")))
    }

    pub fn word(&self, id: u16) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|s| s.as_str())
    }

    /// Tokenize whitespace-separated words, BOS-prefixed, EOT-suffixed,
    /// padded to `max_len`. Errors if the sequence does not fit.
    pub fn encode(&self, words: &[&str], max_len: usize) -> Result<Vec<u16>> {
        if words.len() + 2 > max_len {
            return Err(Error::Data(format!(
                "caption of {} words does not fit in max_len {}",
                words.len(),
                max_len
            )));
        }
        let mut out = Vec::with_capacity(max_len);
        out.push(BOS_ID);
        for w in words {
            out.push(self.id(w)?);
        }
        out.push(EOT_ID);
        out.resize(max_len, PAD_ID);
        Ok(out)
    }
}
