//! Paired bootstrap resampling over sentence indices.

use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::bleu::{check_aligned, sentence_stats, BleuStats};

pub const DEFAULT_SAMPLES: usize = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub bleu_a: f64,
    pub bleu_b: f64,
    /// System with the higher full-corpus BLEU; `None` on a tie.
    pub winner: Option<System>,
    /// Fraction of resamples in which the winner does not beat the other
    /// system; 1.0 when there is no winner.
    pub p_value: f64,
    pub samples: usize,
}

fn pooled(stats: &[BleuStats], indices: &[usize]) -> f64 {
    let mut total = BleuStats::default();
    for &i in indices {
        total.add(&stats[i]);
    }
    total.score()
}

/// Resamples `samples` corpora of `n` sentence indices drawn with
/// replacement (`gen_range(0..n)` from a ChaCha8 stream seeded with `seed`)
/// and scores both systems on each.
pub fn bootstrap_significance<W: Eq + Hash>(
    hyp_a: &[Vec<W>],
    hyp_b: &[Vec<W>],
    refs: &[Vec<W>],
    samples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_aligned(hyp_a.len(), refs.len())?;
    check_aligned(hyp_b.len(), refs.len())?;
    if refs.is_empty() {
        return Err(Error::Metric("bootstrap needs at least one sentence".into()));
    }
    if samples == 0 {
        return Err(Error::Metric("bootstrap needs at least one resample".into()));
    }
    let stats_a = sentence_stats(hyp_a, refs)?;
    let stats_b = sentence_stats(hyp_b, refs)?;
    let all: Vec<usize> = (0..refs.len()).collect();
    let (bleu_a, bleu_b) = (pooled(&stats_a, &all), pooled(&stats_b, &all));
    let winner = if bleu_a > bleu_b {
        Some(System::A)
    } else if bleu_b > bleu_a {
        Some(System::B)
    } else {
        None
    };
    let Some(winner) = winner else {
        return Ok(BootstrapResult {
            bleu_a,
            bleu_b,
            winner: None,
            p_value: 1.0,
            samples,
        });
    };

    let (win, lose) = match winner {
        System::A => (&stats_a, &stats_b),
        System::B => (&stats_b, &stats_a),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = refs.len();
    let mut indices = vec![0usize; n];
    let mut failures = 0usize;
    for _ in 0..samples {
        for slot in indices.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        if pooled(win, &indices) <= pooled(lose, &indices) {
            failures += 1;
        }
    }
    Ok(BootstrapResult {
        bleu_a,
        bleu_b,
        winner: Some(winner),
        p_value: failures as f64 / samples as f64,
        samples,
    })
}
