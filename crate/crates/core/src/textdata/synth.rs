//! Synthetic corpus with planted topic preferences and template summaries.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EngagementRecord, Impression, RawItem, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_topics: usize,
    pub k_history: usize,
    pub vocab_words_per_topic: usize,
    pub title_len: usize,
    pub abstract_len: usize,
    /// Probability that a history item is drawn uniformly from all items.
    pub history_noise: f64,
    pub max_preferred: usize,
    pub impressions_per_user: usize,
    /// Negatives shown per impression next to its single positive.
    pub shown_negatives: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_items: 500,
            n_topics: 8,
            k_history: 12,
            vocab_words_per_topic: 24,
            title_len: 6,
            abstract_len: 12,
            history_noise: 0.1,
            max_preferred: 3,
            impressions_per_user: 3,
            shown_negatives: 4,
            dev_fraction: 0.15,
            test_fraction: 0.15,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_topics < 2 {
            return fail(format!("n_topics must be at least 2, got {}", self.n_topics));
        }
        if self.max_preferred == 0 || self.max_preferred >= self.n_topics {
            return fail(format!(
                "max_preferred must be in 1..{}, got {} (every user needs a non-preferred topic for negatives)",
                self.n_topics, self.max_preferred
            ));
        }
        if self.n_items < self.n_topics {
            return fail(format!("n_items {} is smaller than n_topics {}", self.n_items, self.n_topics));
        }
        if self.n_users == 0 || self.vocab_words_per_topic == 0 || self.title_len == 0 {
            return fail("n_users, vocab_words_per_topic and title_len must be positive".into());
        }
        if self.k_history < self.max_preferred {
            return fail(format!("k_history {} cannot cover {} preferred topics", self.k_history, self.max_preferred));
        }
        if self.shown_negatives == 0 {
            return fail("shown_negatives must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.history_noise) {
            return fail(format!("history_noise {} outside [0, 1]", self.history_noise));
        }
        let held = self.dev_fraction + self.test_fraction;
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || held >= 1.0 {
            return fail(format!("split fractions dev={} test={} leave no training users", self.dev_fraction, self.test_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTruth {
    pub name: String,
    pub words: Vec<String>,
}

/// Ground truth written to `topics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub topics: Vec<TopicTruth>,
    pub item_topics: BTreeMap<String, usize>,
    pub user_topics: BTreeMap<String, Vec<usize>>,
    pub user_split: BTreeMap<String, Split>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub items: Vec<RawItem>,
    pub records: Vec<EngagementRecord>,
    pub impressions: Vec<Impression>,
    pub truth: SynthTruth,
}

pub fn topic_name(t: usize) -> String {
    format!("topic{t}")
}

/// "the user is interested in topic0 , topic2 and topic5 ."
pub fn summary_text(topics: &[usize]) -> String {
    let names: Vec<String> = topics.iter().map(|&t| topic_name(t)).collect();
    let listed = match names.split_last() {
        None => String::new(),
        Some((last, [])) => last.clone(),
        Some((last, rest)) => format!("{} and {last}", rest.join(" , ")),
    };
    format!("the user is interested in {listed} .")
}

const RESERVED: [&str; 14] = [
    "news", "title", "abstract", "category", "book", "description", "the", "user", "is", "interested", "in", "and", "a", "of",
];

fn pseudo_words(n_topics: usize, per_topic: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut used: HashSet<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    (0..n_topics)
        .map(|_| {
            let mut pool = Vec::with_capacity(per_topic);
            while pool.len() < per_topic {
                let syllables = rng.gen_range(2..=3);
                let mut w = String::new();
                for _ in 0..syllables {
                    w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                    w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
                }
                if used.insert(w.clone()) {
                    pool.push(w);
                }
            }
            pool
        })
        .collect()
}

fn words(pool: &[String], n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect::<Vec<_>>().join(" ")
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pools = pseudo_words(config.n_topics, config.vocab_words_per_topic, &mut rng);

    let mut items = Vec::with_capacity(config.n_items);
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); config.n_topics];
    let mut item_topics = BTreeMap::new();
    for i in 0..config.n_items {
        let topic = i % config.n_topics;
        let id = format!("N{}", i + 1);
        let fields = BTreeMap::from([
            ("title".to_string(), words(&pools[topic], config.title_len, &mut rng)),
            ("abstract".to_string(), words(&pools[topic], config.abstract_len, &mut rng)),
            ("category".to_string(), topic_name(topic)),
        ]);
        by_topic[topic].push(i);
        item_topics.insert(id.clone(), topic);
        items.push(RawItem { id, fields });
    }

    let mut order: Vec<usize> = (0..config.n_users).collect();
    order.shuffle(&mut rng);
    let n_dev = (config.n_users as f64 * config.dev_fraction).round() as usize;
    let n_test = (config.n_users as f64 * config.test_fraction).round() as usize;
    let mut splits = vec![Split::Train; config.n_users];
    for (rank, &u) in order.iter().enumerate() {
        if rank < n_dev {
            splits[u] = Split::Dev;
        } else if rank < n_dev + n_test {
            splits[u] = Split::Test;
        }
    }

    let mut records = Vec::with_capacity(config.n_users);
    let mut impressions = Vec::new();
    let mut user_topics = BTreeMap::new();
    let mut user_split = BTreeMap::new();
    let all_topics: Vec<usize> = (0..config.n_topics).collect();
    for u in 0..config.n_users {
        let user_id = format!("U{}", u + 1);
        let n_pref = rng.gen_range(1..=config.max_preferred);
        let mut preferred: Vec<usize> = all_topics.choose_multiple(&mut rng, n_pref).copied().collect();
        preferred.sort_unstable();
        let others: Vec<usize> = all_topics.iter().copied().filter(|t| !preferred.contains(t)).collect();

        let mut history: Vec<usize> = preferred
            .iter()
            .map(|&t| *by_topic[t].choose(&mut rng).expect("topic has items"))
            .collect();
        while history.len() < config.k_history {
            let item = if rng.gen_bool(config.history_noise) {
                rng.gen_range(0..config.n_items)
            } else {
                let t = preferred[rng.gen_range(0..preferred.len())];
                *by_topic[t].choose(&mut rng).expect("topic has items")
            };
            history.push(item);
        }
        history.shuffle(&mut rng);

        let negative_pool: Vec<usize> = others.iter().flat_map(|&t| by_topic[t].iter().copied()).collect();
        for _ in 0..config.impressions_per_user {
            let t = preferred[rng.gen_range(0..preferred.len())];
            let pos = *by_topic[t].choose(&mut rng).expect("topic has items");
            let mut candidates: Vec<(String, u8)> = vec![(items[pos].id.clone(), 1)];
            let negs: Vec<usize> = if negative_pool.len() >= config.shown_negatives {
                negative_pool.choose_multiple(&mut rng, config.shown_negatives).copied().collect()
            } else {
                (0..config.shown_negatives)
                    .map(|_| negative_pool[rng.gen_range(0..negative_pool.len())])
                    .collect()
            };
            candidates.extend(negs.into_iter().map(|n| (items[n].id.clone(), 0)));
            candidates.shuffle(&mut rng);
            impressions.push(Impression {
                id: (impressions.len() + 1).to_string(),
                user_id: user_id.clone(),
                candidates,
                split: splits[u],
            });
        }

        records.push(EngagementRecord {
            user_id: user_id.clone(),
            history: history.iter().map(|&i| items[i].id.clone()).collect(),
            summary: Some(summary_text(&preferred)),
        });
        user_topics.insert(user_id.clone(), preferred);
        user_split.insert(user_id, splits[u]);
    }

    // file order: grouped by split, ids ascending within each
    impressions.sort_by_key(|i| i.split);

    let topics = pools
        .into_iter()
        .enumerate()
        .map(|(t, words)| TopicTruth { name: topic_name(t), words })
        .collect();
    Ok(SynthCorpus {
        config: config.clone(),
        items,
        records,
        impressions,
        truth: SynthTruth {
            topics,
            item_topics,
            user_topics,
            user_split,
        },
    })
}

impl SynthCorpus {
    pub fn news_tsv(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let cat = &it.fields["category"];
            let _ = writeln!(out, "{}\t{cat}\t{cat}\t{}\t{}\t\t[]\t[]", it.id, it.fields["title"], it.fields["abstract"]);
        }
        out
    }

    pub fn behaviors_tsv(&self, split: Split) -> String {
        let histories: BTreeMap<&str, &EngagementRecord> =
            self.records.iter().map(|r| (r.user_id.as_str(), r)).collect();
        let mut out = String::new();
        for imp in self.impressions.iter().filter(|i| i.split == split) {
            let history = histories[imp.user_id.as_str()].history.join(" ");
            let cands: Vec<String> = imp.candidates.iter().map(|(id, l)| format!("{id}-{l}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t11/11/2019 9:05:58 AM\t{history}\t{}",
                imp.id,
                imp.user_id,
                cands.join(" ")
            );
        }
        out
    }

    pub fn summaries_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            if let Some(s) = &r.summary {
                let _ = writeln!(out, "{}\t{s}", r.user_id);
            }
        }
        out
    }

    /// Writes news.tsv, behaviors_{train,dev,test}.tsv, summaries.tsv and topics.json.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            ("news.tsv".to_string(), self.news_tsv()),
            ("summaries.tsv".to_string(), self.summaries_tsv()),
            ("topics.json".to_string(), serde_json::to_string_pretty(&self.truth)? + "\n"),
        ];
        for s in Split::ALL {
            files.push((format!("behaviors_{}.tsv", s.name()), self.behaviors_tsv(s)));
        }
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn preferred_topics(&self, user_id: &str) -> Option<&[usize]> {
        self.truth.user_topics.get(user_id).map(Vec::as_slice)
    }

    pub fn topics_used(&self) -> BTreeSet<usize> {
        self.truth.user_topics.values().flatten().copied().collect()
    }
}
