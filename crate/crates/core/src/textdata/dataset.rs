use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mind::{parse_mind_behaviors, parse_mind_news, parse_summaries};
use super::synth::SynthCorpus;
use super::{sample_negatives, ContentItem, EngagementRecord, FieldCaps, Impression, RawItem, Split, Template, TrainInstance, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataOptions {
    /// `mind`, `goodreads` or a literal template string.
    pub template: String,
    /// Defaults to the caps of the named template.
    pub caps: Option<FieldCaps>,
    pub max_vocab: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            template: "mind".into(),
            caps: None,
            max_vocab: 30_000,
        }
    }
}

impl DataOptions {
    pub fn field_caps(&self) -> FieldCaps {
        self.caps.clone().unwrap_or_else(|| FieldCaps::for_template(&self.template))
    }
}

/// A tokenized corpus with users and impressions for every split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocab,
    pub template: Template,
    pub items: Vec<ContentItem>,
    item_index: HashMap<String, usize>,
    pub users: BTreeMap<String, EngagementRecord>,
    pub impressions: Vec<Impression>,
    /// References to unknown news ids dropped while parsing.
    pub dropped: usize,
}

impl Dataset {
    /// Builds the vocabulary from item texts and training-user summaries unless one is given.
    pub fn from_parts(
        raw_items: Vec<RawItem>,
        records: Vec<EngagementRecord>,
        impressions: Vec<Impression>,
        opts: &DataOptions,
        vocab: Option<Vocab>,
    ) -> Result<Dataset> {
        let template = Template::named(&opts.template)?;
        let caps = opts.field_caps();
        let mut users = BTreeMap::new();
        for r in records {
            users.entry(r.user_id.clone()).or_insert(r);
        }
        let vocab = match vocab {
            Some(v) => v,
            None => {
                let texts: Vec<String> = raw_items
                    .iter()
                    .map(|it| template.format(&it.fields))
                    .collect::<Result<_>>()?;
                let train_users: HashSet<&str> = impressions
                    .iter()
                    .filter(|i| i.split == Split::Train)
                    .map(|i| i.user_id.as_str())
                    .collect();
                let summaries = users
                    .values()
                    .filter(|r| train_users.contains(r.user_id.as_str()))
                    .filter_map(|r| r.summary.as_deref());
                Vocab::build(texts.iter().map(String::as_str).chain(summaries), opts.max_vocab)?
            }
        };
        let items: Vec<ContentItem> = raw_items
            .into_iter()
            .map(|raw| ContentItem::build(raw, &template, &vocab, &caps))
            .collect::<Result<_>>()?;
        let item_index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        Ok(Dataset {
            vocab,
            template,
            items,
            item_index,
            users,
            impressions,
            dropped: 0,
        })
    }

    pub fn from_synth(corpus: &SynthCorpus, opts: &DataOptions, vocab: Option<Vocab>) -> Result<Dataset> {
        Dataset::from_parts(
            corpus.items.clone(),
            corpus.records.clone(),
            corpus.impressions.clone(),
            opts,
            vocab,
        )
    }

    /// Reads news.tsv, behaviors_{train,dev,test}.tsv and an optional summaries.tsv.
    /// The test split file may be absent.
    pub fn load_dir(dir: &Path, opts: &DataOptions, vocab: Option<Vocab>) -> Result<Dataset> {
        let raw_items = parse_mind_news(&dir.join("news.tsv"))?;
        let known: HashSet<String> = raw_items.iter().map(|it| it.id.clone()).collect();
        let mut records = Vec::new();
        let mut impressions = Vec::new();
        let mut dropped = 0;
        for split in Split::ALL {
            let path = dir.join(format!("behaviors_{}.tsv", split.name()));
            if split == Split::Test && !path.exists() {
                continue;
            }
            let log = parse_mind_behaviors(&path, &known, split)?;
            dropped += log.dropped.len();
            records.extend(log.records);
            impressions.extend(log.impressions);
        }
        let summaries_path = dir.join("summaries.tsv");
        if summaries_path.exists() {
            let summaries = parse_summaries(&summaries_path)?;
            for r in &mut records {
                r.summary = summaries.get(&r.user_id).cloned();
            }
        }
        let mut ds = Dataset::from_parts(raw_items, records, impressions, opts, vocab)?;
        ds.dropped = dropped;
        Ok(ds)
    }

    pub fn item(&self, id: &str) -> Result<&ContentItem> {
        self.item_index
            .get(id)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::UnknownId(format!("news item {id}")))
    }

    pub fn user(&self, id: &str) -> Result<&EngagementRecord> {
        self.users.get(id).ok_or_else(|| Error::UnknownId(format!("user {id}")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Impression> {
        self.impressions.iter().filter(move |i| i.split == split)
    }

    /// Users appearing in impressions of `split`, in id order.
    pub fn split_users(&self, split: Split) -> Vec<&str> {
        let ids: HashSet<&str> = self.split(split).map(|i| i.user_id.as_str()).collect();
        self.users.keys().map(String::as_str).filter(|u| ids.contains(u)).collect()
    }

    /// Token sequences of the user's last `k` history items.
    pub fn history_tokens(&self, user_id: &str, k: usize) -> Result<Vec<&[u32]>> {
        self.user(user_id)?
            .recent(k)
            .iter()
            .map(|id| self.item(id).map(|it| it.token_ids.as_slice()))
            .collect()
    }

    pub fn summary_ids(&self, user_id: &str) -> Result<Option<Vec<u32>>> {
        Ok(self.user(user_id)?.summary.as_deref().map(|s| self.vocab.encode(s)))
    }

    /// Training instances in impression order, negatives sampled per positive.
    pub fn train_instances<R: Rng + ?Sized>(&self, ratio: usize, rng: &mut R) -> Result<Vec<TrainInstance>> {
        let mut out = Vec::new();
        for imp in self.split(Split::Train) {
            if imp.positives().next().is_none() {
                log::warn!("impression {} has no positive; skipped", imp.id);
                continue;
            }
            out.extend(sample_negatives(imp, ratio, rng)?);
        }
        Ok(out)
    }

    /// Keeps a seeded random `fraction` of the training impressions; other splits are untouched.
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!("train fraction {fraction} outside (0, 1]")));
        }
        let train: Vec<usize> = (0..self.impressions.len())
            .filter(|&i| self.impressions[i].split == Split::Train)
            .collect();
        let keep_n = ((train.len() as f64 * fraction).round() as usize).max(1).min(train.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: HashSet<usize> = train.choose_multiple(&mut rng, keep_n).copied().collect();
        let mut out = self.clone();
        out.impressions = self
            .impressions
            .iter()
            .enumerate()
            .filter(|(i, imp)| imp.split != Split::Train || keep.contains(i))
            .map(|(_, imp)| imp.clone())
            .collect();
        Ok(out)
    }
}
