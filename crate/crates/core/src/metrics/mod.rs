//! Diversity and novelty metrics over token sequences.
//!
//! Distinct n-gram ratios are adjusted by the count expected under uniform
//! random sampling, so scores are comparable across output lengths. The
//! adjustment is computed in log space; the naive product overflows long
//! before the quantities stop being meaningful.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const EAD_MAX_ORDER: usize = 5;

fn ngram_set(seqs: &[Vec<u32>], n: usize) -> (BTreeSet<Vec<u32>>, u64) {
    let mut set = BTreeSet::new();
    let mut total = 0u64;
    for seq in seqs {
        if seq.len() >= n {
            for w in seq.windows(n) {
                set.insert(w.to_vec());
                total += 1;
            }
        }
    }
    (set, total)
}

/// Expected number of distinct n-grams when drawing `count` of them
/// uniformly from `vocab_size^n` possibilities. Exact 1.0 at count 1.
fn expected_distinct(count: u64, n: usize, vocab_size: usize) -> f64 {
    debug_assert!(count > 0 && vocab_size > 1);
    if count == 1 {
        return 1.0;
    }
    // inv = 1 / V^n without forming V^n.
    let inv = (-(n as f64) * (vocab_size as f64).ln()).exp();
    -(count as f64 * (-inv).ln_1p()).exp_m1() / inv
}

/// Distinct n-grams across all sequences, divided by the count expected if
/// the same number of n-grams were drawn uniformly. None when no sequence
/// is long enough to contribute an n-gram.
pub fn ead(seqs: &[Vec<u32>], n: usize, vocab_size: usize) -> Option<f64> {
    let (set, count) = ngram_set(seqs, n);
    if count == 0 {
        return None;
    }
    Some(set.len() as f64 / expected_distinct(count, n, vocab_size))
}

/// Mean of `ead` over orders 1 through `EAD_MAX_ORDER`, skipping orders
/// with no n-grams. None when every order is empty.
pub fn mean_ead(seqs: &[Vec<u32>], vocab_size: usize) -> Option<f64> {
    let vals: Vec<f64> = (1..=EAD_MAX_ORDER)
        .filter_map(|n| ead(seqs, n, vocab_size))
        .collect();
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Like `ead`, but only candidate n-grams absent from the reference pool
/// count as distinct. Candidates identical to the reference score exactly 0.
pub fn ap_ead(cands: &[Vec<u32>], refs: &[Vec<u32>], n: usize, vocab_size: usize) -> Option<f64> {
    let (cand_set, count) = ngram_set(cands, n);
    if count == 0 {
        return None;
    }
    let (ref_set, _) = ngram_set(refs, n);
    let novel = cand_set.difference(&ref_set).count();
    Some(novel as f64 / expected_distinct(count, n, vocab_size))
}

pub fn mean_ap_ead(cands: &[Vec<u32>], refs: &[Vec<u32>], vocab_size: usize) -> Option<f64> {
    let vals: Vec<f64> = (1..=EAD_MAX_ORDER)
        .filter_map(|n| ap_ead(cands, refs, n, vocab_size))
        .collect();
    if vals.is_empty() {
        return None;
    }
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Feature hashing of n-gram counts into a fixed-width signed vector.
#[derive(Clone, Copy, Debug)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub max_order: usize,
    pub salt: u64,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        HashedNgramEmbedder {
            dim: 256,
            max_order: 3,
            salt: 0x6e6772,
        }
    }
}

impl HashedNgramEmbedder {
    /// L2-normalized hashed counts over orders 1..=max_order. A sequence
    /// with no n-grams embeds to the zero vector.
    pub fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        assert!(self.dim > 0 && self.max_order > 0);
        let mut v = vec![0.0f64; self.dim];
        for n in 1..=self.max_order {
            if tokens.len() < n {
                break;
            }
            for w in tokens.windows(n) {
                let mut h = crate::derive_seed(self.salt, &[n as u64]);
                for &t in w {
                    h = crate::derive_seed(h, &[t as u64]);
                }
                let bucket = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
                v[bucket] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Cosine similarity; zero whenever either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// One minus the mean pairwise cosine over all unordered pairs.
/// Fewer than two sequences have no pairs and score 0.
pub fn pairwise_diversity(embedder: &HashedNgramEmbedder, seqs: &[Vec<u32>]) -> f64 {
    if seqs.len() < 2 {
        return 0.0;
    }
    let vecs: Vec<Vec<f64>> = seqs.iter().map(|s| embedder.embed(s)).collect();
    let mut sum = 0.0;
    let mut pairs = 0u64;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            sum += cosine(&vecs[i], &vecs[j]);
            pairs += 1;
        }
    }
    1.0 - sum / pairs as f64
}

/// Mean over aligned pairs of one minus the candidate/reference cosine.
/// Identical aligned sequences score 0.
pub fn ap_cosine(embedder: &HashedNgramEmbedder, cands: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    assert_eq!(cands.len(), refs.len());
    if cands.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        if c == r {
            // Shared path for the identical case so it cancels exactly.
            continue;
        }
        sum += 1.0 - cosine(&embedder.embed(c), &embedder.embed(r));
    }
    sum / cands.len() as f64
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeanCi95 {
    pub mean: f64,
    pub half_width: f64,
}

/// Normal-approximation 95% interval with the sample standard deviation.
/// A single observation has zero width; no observations give zero mean.
pub fn mean_ci95(xs: &[f64]) -> MeanCi95 {
    if xs.is_empty() {
        return MeanCi95 {
            mean: 0.0,
            half_width: 0.0,
        };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return MeanCi95 {
            mean,
            half_width: 0.0,
        };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    MeanCi95 {
        mean,
        half_width: 1.96 * var.sqrt() / n.sqrt(),
    }
}
