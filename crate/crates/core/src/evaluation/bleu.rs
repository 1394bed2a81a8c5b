//! Corpus BLEU with up to 4-grams, clipped counts and a brevity penalty.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for BLEU; sums over sentences give corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped n-gram matches, index `n - 1`.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram counts, index `n - 1`.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn sentence<W: Eq + Hash>(hyp: &[W], reference: &[W]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                s.matches[n - 1] += count.min(clip);
                s.totals[n - 1] += count;
            }
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Modified precision for order `n` (1-based), `None` without n-grams.
    pub fn precision(&self, n: usize) -> Option<f64> {
        let total = self.totals[n - 1];
        (total > 0).then(|| self.matches[n - 1] as f64 / total as f64)
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// BLEU in `[0, 100]`; zero as soon as any precision is zero or undefined.
    pub fn score(&self) -> f64 {
        let mut log_sum = 0.0;
        for n in 1..=MAX_ORDER {
            match self.precision(n) {
                Some(p) if p > 0.0 => log_sum += p.ln(),
                _ => return 0.0,
            }
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

pub(crate) fn check_aligned(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::Metric(format!("{hyps} hypotheses but {refs} references")));
    }
    Ok(())
}

/// Per-sentence statistics, for resampling.
pub fn sentence_stats<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<Vec<BleuStats>> {
    check_aligned(hyps.len(), refs.len())?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::sentence(h, r)).collect())
}

pub fn corpus_stats<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<BleuStats> {
    let mut total = BleuStats::default();
    for s in sentence_stats(hyps, refs)? {
        total.add(&s);
    }
    Ok(total)
}

pub fn bleu_corpus<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    Ok(corpus_stats(hyps, refs)?.score())
}
