use rand::seq::SliceRandom;
use rand::Rng;

use super::{Impression, TrainInstance};
use crate::error::{Error, Result};

/// Chronological chunks of `items_per_session`; the last chunk may be shorter.
/// An empty history yields no sessions (cold-start).
pub fn partition_sessions<T: Clone>(history: &[T], items_per_session: usize) -> Result<Vec<Vec<T>>> {
    if items_per_session == 0 {
        return Err(Error::config("items_per_session must be at least 1"));
    }
    Ok(history.chunks(items_per_session).map(<[T]>::to_vec).collect())
}

/// Drops whole items from the tail of a session until its token stream fits
/// `max_tokens`. A lone item longer than the budget is cut to its prefix.
pub fn fit_session_budget(mut items: Vec<Vec<u32>>, max_tokens: usize) -> Vec<Vec<u32>> {
    let mut total: usize = items.iter().map(Vec::len).sum();
    while total > max_tokens && items.len() > 1 {
        total -= items.pop().map_or(0, |i| i.len());
    }
    if let Some(only) = items.first_mut() {
        only.truncate(max_tokens);
    }
    items
}

/// Session token streams for a history of tokenized items.
pub fn build_sessions(items: &[Vec<u32>], items_per_session: usize, max_tokens: usize) -> Result<Vec<Vec<Vec<u32>>>> {
    Ok(partition_sessions(items, items_per_session)?
        .into_iter()
        .map(|s| fit_session_budget(s, max_tokens))
        .collect())
}

/// One training instance per positive candidate, each with exactly `ratio`
/// negatives from the same impression: without replacement when enough were
/// shown, with replacement otherwise. Impressions without negatives yield nothing.
pub fn sample_negatives<R: Rng + ?Sized>(impression: &Impression, ratio: usize, rng: &mut R) -> Result<Vec<TrainInstance>> {
    if ratio == 0 {
        return Err(Error::config("negative sampling ratio must be at least 1"));
    }
    let positives: Vec<&str> = impression.positives().collect();
    if positives.is_empty() {
        return Err(Error::config(format!("impression {} has no positive candidate", impression.id)));
    }
    let negatives: Vec<&str> = impression.negatives().collect();
    if negatives.is_empty() {
        log::warn!("impression {} has no shown negatives; skipped", impression.id);
        return Ok(Vec::new());
    }
    Ok(positives
        .into_iter()
        .map(|pos| {
            let negs: Vec<String> = if negatives.len() >= ratio {
                negatives.choose_multiple(rng, ratio).map(|s| s.to_string()).collect()
            } else {
                (0..ratio)
                    .map(|_| negatives[rng.gen_range(0..negatives.len())].to_string())
                    .collect()
            };
            TrainInstance {
                user_id: impression.user_id.clone(),
                positive: pos.to_string(),
                negatives: negs,
            }
        })
        .collect())
}
