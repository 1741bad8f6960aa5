//! Tokenization, content formatting, corpus ingestion and synthetic data.

mod dataset;
pub mod format;
pub mod mind;
pub mod sessions;
pub mod synth;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use dataset::{DataOptions, Dataset};
pub use format::{FieldCaps, Template};
pub use sessions::{build_sessions, fit_session_budget, partition_sessions, sample_negatives};
pub use synth::{synth_generate, SynthConfig, SynthCorpus};
pub use vocab::{split_tokens, Vocab, EOS, PAD, SOS, UNK};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// A news article or book as parsed, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawItem {
    pub id: String,
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentItem {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    pub formatted: String,
    pub token_ids: Vec<u32>,
}

impl ContentItem {
    pub fn build(raw: RawItem, template: &Template, vocab: &Vocab, caps: &FieldCaps) -> Result<ContentItem> {
        let formatted = template.format(&raw.fields)?;
        let token_ids = template.token_ids(&raw.fields, vocab, caps)?;
        Ok(ContentItem {
            id: raw.id,
            fields: raw.fields,
            formatted,
            token_ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngagementRecord {
    pub user_id: String,
    /// Most recent last.
    pub history: Vec<String>,
    pub summary: Option<String>,
}

impl EngagementRecord {
    /// The last `k` history ids.
    pub fn recent(&self, k: usize) -> &[String] {
        &self.history[self.history.len().saturating_sub(k)..]
    }

    /// Chronological chunks of the last `k` history ids.
    pub fn sessions(&self, k: usize, items_per_session: usize) -> Result<Vec<Vec<String>>> {
        partition_sessions(self.recent(k), items_per_session)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impression {
    pub id: String,
    pub user_id: String,
    pub candidates: Vec<(String, u8)>,
    pub split: Split,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| c.1 == 1).map(|c| c.0.as_str())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().filter(|c| c.1 == 0).map(|c| c.0.as_str())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.candidates.iter().map(|c| c.1).collect()
    }
}

/// One positive with its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainInstance {
    pub user_id: String,
    pub positive: String,
    pub negatives: Vec<String>,
}
