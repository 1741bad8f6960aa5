//! Per-impression ranking metrics and ROUGE.

mod rouge;

use serde::{Deserialize, Serialize};

pub use rouge::{lcs_len, mean_rouge, rouge, RougeScores};

use crate::error::{Error, Result};

/// Candidate scores and 0/1 labels of one impression.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImpressionResult {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

fn counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Mann-Whitney statistic with ties counted as one half. `None` for single-class input.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Indices by descending score; ties keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn mrr(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (pos, _) = counts(labels);
    if pos == 0 {
        return None;
    }
    let total: f64 = ranking(scores)
        .iter()
        .enumerate()
        .filter(|(_, &i)| labels[i] == 1)
        .map(|(r, _)| 1.0 / (r + 1) as f64)
        .sum();
    Some(total / pos as f64)
}

pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (pos, _) = counts(labels);
    if pos == 0 || k == 0 {
        return None;
    }
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ranking(scores)
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| labels[i] == 1)
        .map(|(r, _)| discount(r))
        .sum();
    let ideal: f64 = (0..pos.min(k)).map(discount).sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n_impressions: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge: Option<RougeScores>,
}

/// Unweighted means over impressions having both a positive and a negative;
/// the rest are counted in `n_skipped`.
pub fn aggregate(results: &[ImpressionResult]) -> Result<MetricsReport> {
    let mut sums = [0.0; 4];
    let mut n = 0;
    for r in results {
        let Some(a) = auc(&r.scores, &r.labels) else {
            continue;
        };
        let vals = [
            a,
            mrr(&r.scores, &r.labels).unwrap_or(0.0),
            ndcg_at_k(&r.scores, &r.labels, 5).unwrap_or(0.0),
            ndcg_at_k(&r.scores, &r.labels, 10).unwrap_or(0.0),
        ];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::config(format!("none of {} impressions is scorable", results.len())));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        auc: sums[0] / nf,
        mrr: sums[1] / nf,
        ndcg5: sums[2] / nf,
        ndcg10: sums[3] / nf,
        n_impressions: n,
        n_skipped: results.len() - n,
        rouge: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pairwise_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn random_impression(rng: &mut ChaCha8Rng) -> ImpressionResult {
        let len = rng.gen_range(2..20);
        let mut labels: Vec<u8> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        // coarse grid so ties occur
        let scores = (0..len).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        ImpressionResult { scores, labels }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        let a = auc(&[0.8, 0.9, 0.2, 0.4], &[1, 0, 0, 0]).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(auc(&[0.3; 5], &[1, 0, 1, 0, 0]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.2], &[1, 1]), None);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr(&[0.9, 0.1, 0.2], &[1, 0, 0]), Some(1.0));
        assert_eq!(mrr(&[0.1, 0.9, 0.5], &[1, 0, 0]), Some(1.0 / 3.0));
        let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        assert!((mrr(&s, &[0, 1, 0, 0, 1, 0]).unwrap() - 0.35).abs() < 1e-15);
        assert_eq!(mrr(&s, &[0; 6]), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[0.9, 0.1], &[1, 0], 5), Some(1.0));
        assert!((ndcg_at_k(&[0.5, 0.9, 0.7, 0.1], &[1, 0, 0, 0], 5).unwrap() - 0.5).abs() < 1e-15);
        let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let want = (1.0 + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at_k(&s, &[1, 0, 0, 1, 0, 0], 5).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.8772).abs() < 1e-4);
    }

    #[test]
    fn aggregate_examples() {
        let one = ImpressionResult { scores: vec![0.9, 0.1], labels: vec![1, 0] };
        let half = ImpressionResult { scores: vec![0.5, 0.5], labels: vec![1, 0] };
        let skip = ImpressionResult { scores: vec![0.5, 0.1], labels: vec![1, 1] };
        let r = aggregate(&[one.clone()]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = aggregate(&[one, half, skip.clone()]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!((r.n_impressions, r.n_skipped), (2, 1));
        assert!(aggregate(&[skip]).is_err());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("rouge").is_none());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = random_impression(&mut rng);
            let fast = auc(&r.scores, &r.labels).unwrap();
            assert!((fast - pairwise_auc(&r.scores, &r.labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rs: Vec<_> = (0..100).map(|_| random_impression(&mut rng)).collect();
        let rep = aggregate(&rs).unwrap();
        let mut a = 0.0;
        for r in &rs {
            a += auc(&r.scores, &r.labels).unwrap();
        }
        assert_eq!(rep.auc, a / 100.0);
    }

    proptest! {
        #[test]
        fn ranking_metrics_are_bounded_and_monotone_invariant(
            raw in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..30),
            scale in 0.1f64..10.0,
            shift in -3.0f64..3.0,
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            labels[1] = 0;
            // distinct scores: stable-order tie handling is not under test here
            for (i, s) in scores.iter_mut().enumerate() {
                *s += i as f64 * 1e-6;
            }
            let affine: Vec<f64> = scores.iter().map(|s| s * scale + shift).collect();
            let expd: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            for m in [
                auc(&scores, &labels).unwrap(),
                mrr(&scores, &labels).unwrap(),
                ndcg_at_k(&scores, &labels, 5).unwrap(),
                ndcg_at_k(&scores, &labels, 10).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            for t in [&affine, &expd] {
                prop_assert_eq!(auc(&scores, &labels), auc(t, &labels));
                prop_assert_eq!(mrr(&scores, &labels), mrr(t, &labels));
                prop_assert_eq!(ndcg_at_k(&scores, &labels, 5), ndcg_at_k(t, &labels, 5));
            }
        }
    }
}
