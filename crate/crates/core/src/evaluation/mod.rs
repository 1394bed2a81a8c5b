//! Translation quality metrics and reports.
//!
//! All metrics work on whitespace tokens and are case-sensitive; callers
//! lowercase beforehand if they want case-insensitive scores.

mod bleu;
mod bootstrap;
mod buckets;
mod ter;

use std::fmt;
use std::hash::Hash;

use crate::error::Result;

pub use bleu::{bleu_corpus, corpus_stats, sentence_stats, BleuStats, MAX_ORDER};
pub use bootstrap::{bootstrap_significance, BootstrapResult, System, DEFAULT_SAMPLES};
pub use buckets::{buckets_to_csv, buckets_to_svg, length_bucket_report, Bucket, DEFAULT_BUCKET_WIDTH};
pub use ter::{ter_corpus, ter_edits, MAX_SHIFT_ITERATIONS, MAX_SHIFT_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    /// TER ×100.
    pub ter: f64,
    pub sentences: usize,
    pub p_value: Option<f64>,
    pub buckets: Vec<Bucket>,
}

impl EvalReport {
    pub fn new<W: Eq + Hash + Clone>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<Self> {
        Ok(EvalReport {
            bleu: bleu_corpus(hyps, refs)?,
            ter: ter_corpus(hyps, refs)?,
            sentences: refs.len(),
            p_value: None,
            buckets: Vec::new(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BLEU {:.2} / TER {:.2}", self.bleu, self.ter)
    }
}

/// Whitespace-tokenizes lines, optionally lowercasing them first.
pub fn tokenize_lines(lines: &[String], lowercase: bool) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| {
            let l = if lowercase { l.to_lowercase() } else { l.clone() };
            l.split_whitespace().map(str::to_owned).collect()
        })
        .collect()
}
