//! Corpus-level 4-gram BLEU with brevity penalty (multi-bleu convention)
//! and add-one-smoothed per-sentence BLEU for bucket analysis.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::TokenId;
use crate::exec::{self, Parallelism};

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Error)]
pub enum BleuError {
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty reference corpus")]
    EmptyReferences,
}

/// Corpus BLEU plus its components.
#[derive(Debug, Clone)]
pub struct BleuReport {
    /// Corpus-level BLEU in [0, 100].
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..=4.
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Default, Clone)]
struct NgramStats {
    matched: [u64; MAX_NGRAM],
    total: [u64; MAX_NGRAM],
    hyp_len: usize,
    ref_len: usize,
}

impl NgramStats {
    fn add(&mut self, other: &NgramStats) {
        for n in 0..MAX_NGRAM {
            self.matched[n] += other.matched[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(sentence: &[TokenId], n: usize) -> HashMap<&[TokenId], u64> {
    let mut counts: HashMap<&[TokenId], u64> = HashMap::new();
    if sentence.len() >= n {
        for w in sentence.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn sentence_stats(hyp: &[TokenId], reference: &[TokenId]) -> NgramStats {
    let mut stats = NgramStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_NGRAM {
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        let mut matched = 0u64;
        let mut total = 0u64;
        for (gram, &c) in &hyp_counts {
            total += c;
            if let Some(&r) = ref_counts.get(gram) {
                matched += c.min(r);
            }
        }
        stats.matched[n - 1] = matched;
        stats.total[n - 1] = total;
    }
    stats
}

fn bleu_from_stats(stats: &NgramStats) -> BleuReport {
    let mut precisions = [0.0f64; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if stats.total[n] > 0 {
            stats.matched[n] as f64 / stats.total[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    // any zero precision zeroes the geometric mean, as multi-bleu does
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
    }
}

/// Unsmoothed corpus-level 4-gram BLEU with brevity penalty. A zero
/// precision at any order yields BLEU 0.
pub fn corpus_bleu(
    hypotheses: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    mode: Parallelism,
) -> Result<BleuReport, BleuError> {
    if hypotheses.len() != references.len() {
        return Err(BleuError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(BleuError::EmptyReferences);
    }
    // integer n-gram counts: any summation order gives the same totals
    let per_sentence = exec::map_indexed(mode, hypotheses.len(), |i| {
        sentence_stats(&hypotheses[i], &references[i])
    });
    let mut stats = NgramStats::default();
    for s in &per_sentence {
        stats.add(s);
    }
    Ok(bleu_from_stats(&stats))
}

/// Per-sentence BLEU with add-one smoothing on every precision, for
/// bucket analysis over short sentences. Not comparable to
/// [`corpus_bleu`].
pub fn sentence_bleu_smoothed(hyp: &[TokenId], reference: &[TokenId]) -> f64 {
    let stats = sentence_stats(hyp, reference);
    let mut log_mean = 0.0;
    for n in 0..MAX_NGRAM {
        let p = (stats.matched[n] as f64 + 1.0) / (stats.total[n] as f64 + 1.0);
        log_mean += p.ln();
    }
    log_mean /= MAX_NGRAM as f64;
    let bp = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_mean.exp()
}
