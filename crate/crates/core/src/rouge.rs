//! ROUGE-1/2/L precision, recall and F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeEntry {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeEntry {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        if hyp == 0 || reference == 0 {
            return RougeEntry::default();
        }
        let precision = overlap as f64 / hyp as f64;
        let recall = overlap as f64 / reference as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeEntry {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub rouge1: RougeEntry,
    pub rouge2: RougeEntry,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeEntry,
}

/// Lowercase + whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap score. Panics if `n == 0`.
pub fn rouge_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> RougeEntry {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |xs: &[T]| xs.len().saturating_sub(n - 1);
    RougeEntry::from_counts(overlap, total(hyp), total(reference))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> RougeEntry {
    RougeEntry::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn score<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        rouge1: rouge_n(hyp, reference, 1),
        rouge2: rouge_n(hyp, reference, 2),
        rouge_l: rouge_l(hyp, reference),
    }
}

pub fn score_text(hyp: &str, reference: &str) -> RougeScore {
    score(&tokenize(hyp), &tokenize(reference))
}

/// Mean of every field over `scores`; zeros for an empty slice.
pub fn corpus_mean(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&RougeScore) -> RougeEntry| {
        let mut acc = RougeEntry::default();
        for s in scores {
            let e = f(s);
            acc.precision += e.precision / n;
            acc.recall += e.recall / n;
            acc.f1 += e.f1 / n;
        }
        acc
    };
    RougeScore {
        rouge1: mean(|s| s.rouge1),
        rouge2: mean(|s| s.rouge2),
        rouge_l: mean(|s| s.rouge_l),
    }
}
