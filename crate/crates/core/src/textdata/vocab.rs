use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[SOS]", "[EOS]", "[UNK]"];

/// Lowercases and splits on whitespace; every punctuation or symbol character
/// becomes its own token, alphanumeric runs form words.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps the `max_size - 4` most frequent tokens; ties go to the lexicographically smaller token.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
        if max_size <= SPECIALS.len() {
            return Err(Error::config(format!("vocabulary size {max_size} leaves no room beyond special tokens")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        for s in SPECIALS {
            counts.remove(s);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with [PAD] [SOS] [EOS] [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping [PAD], [SOS] and [EOS].
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | SOS | EOS))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
