//! Closed word-level vocabulary. Text is split on whitespace and punctuation
//! is peeled off into its own tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const UNK: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<bos>", "<pad>", "<unk>"];

const PUNCT: &[char] = &[',', '.', ';', ':', '!', '?', '"', '(', ')'];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Vocab { pieces, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.pieces
    }
}

impl Vocab {
    /// Specials first, then the distinct words in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                pieces.push(w.to_string());
            }
        }
        Vocab::from(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        self.pieces.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Maps pre-split pieces; unknown pieces are an error.
    pub fn ids_strict(&self, pieces: &[String]) -> Result<Vec<u32>> {
        pieces
            .iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::TokenizerMismatch(format!("piece `{p}` not in vocabulary")))
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.piece(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable short hash of the piece list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
            out.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        while let Some(c) = rest.chars().next_back().filter(|c| PUNCT.contains(c)) {
            tail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}
