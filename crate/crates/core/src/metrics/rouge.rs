use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::textdata::split_tokens;

/// F1 scores; `empty_reference` flags a reference without tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    #[serde(default)]
    pub empty_reference: bool,
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

fn ngram_f1(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let c = split_tokens(candidate);
    let r = split_tokens(reference);
    if r.is_empty() {
        return RougeScores {
            empty_reference: true,
            ..RougeScores::default()
        };
    }
    RougeScores {
        rouge1_f: ngram_f1(&c, &r, 1),
        rouge2_f: ngram_f1(&c, &r, 2),
        rouge_l_f: f1(lcs_len(&c, &r), c.len(), r.len()),
        empty_reference: false,
    }
}

/// Mean over `(candidate, reference)` pairs; `None` for no pairs.
pub fn mean_rouge<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Option<RougeScores> {
    let mut sum = RougeScores::default();
    let mut n = 0usize;
    for (c, r) in pairs {
        let s = rouge(c, r);
        sum.rouge1_f += s.rouge1_f;
        sum.rouge2_f += s.rouge2_f;
        sum.rouge_l_f += s.rouge_l_f;
        sum.empty_reference |= s.empty_reference;
        n += 1;
    }
    (n > 0).then(|| RougeScores {
        rouge1_f: sum.rouge1_f / n as f64,
        rouge2_f: sum.rouge2_f / n as f64,
        rouge_l_f: sum.rouge_l_f / n as f64,
        empty_reference: sum.empty_reference,
    })
}
