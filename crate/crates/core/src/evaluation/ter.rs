//! Translation edit rate: word edits plus block shifts per reference word.
//!
//! Shifts are searched greedily. A candidate moves a hypothesis phrase that
//! also occurs in the reference to the position aligned with that reference
//! occurrence; the move that lowers the edit distance most is applied, and
//! the search repeats until no shift helps.

use crate::error::{Error, Result};

use super::bleu::check_aligned;

pub const MAX_SHIFT_ITERATIONS: usize = 10;
pub const MAX_SHIFT_SIZE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Match,
    Substitute,
    /// Hypothesis word with no reference counterpart.
    Insert,
    /// Reference word missing from the hypothesis.
    Delete,
}

/// Levenshtein distance over words and, for every reference position, the
/// number of hypothesis words consumed before it in an optimal alignment.
/// `matched[i]` holds the reference index hyp word `i` is matched to.
fn align<W: PartialEq>(hyp: &[W], reference: &[W]) -> (usize, Vec<usize>, Vec<Option<usize>>) {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }

    let mut ref_pos = vec![0usize; m];
    let mut matched = vec![None; n];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let step = if i > 0 && j > 0 && hyp[i - 1] == reference[j - 1] && d[i][j] == d[i - 1][j - 1] {
            Step::Match
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            Step::Substitute
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            Step::Insert
        } else {
            Step::Delete
        };
        match step {
            Step::Match | Step::Substitute => {
                if step == Step::Match {
                    matched[i - 1] = Some(j - 1);
                }
                ref_pos[j - 1] = i - 1;
                i -= 1;
                j -= 1;
            }
            Step::Insert => i -= 1,
            Step::Delete => {
                ref_pos[j - 1] = i;
                j -= 1;
            }
        }
    }
    (d[n][m], ref_pos, matched)
}

fn apply_shift<W: Clone>(hyp: &[W], start: usize, len: usize, dest: usize) -> Vec<W> {
    let phrase = &hyp[start..start + len];
    let mut rest: Vec<W> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
    let at = if dest > start { dest - len } else { dest };
    rest.splice(at..at, phrase.iter().cloned());
    rest
}

/// Edits (insertions, deletions, substitutions and shifts) needed to turn
/// `hyp` into `reference`.
pub fn ter_edits<W: PartialEq + Clone>(hyp: &[W], reference: &[W]) -> (usize, usize) {
    let mut current = hyp.to_vec();
    let (mut dist, mut ref_pos, mut matched) = align(&current, reference);
    let mut shifts = 0;
    for _ in 0..MAX_SHIFT_ITERATIONS {
        if dist == 0 {
            break;
        }
        let mut best: Option<(usize, Vec<W>)> = None;
        for start in 0..current.len() {
            for len in 1..=MAX_SHIFT_SIZE.min(current.len() - start) {
                let phrase = &current[start..start + len];
                for r in 0..reference.len().saturating_sub(len - 1) {
                    if &reference[r..r + len] != phrase {
                        continue;
                    }
                    if (0..len).all(|k| matched[start + k] == Some(r + k)) {
                        continue;
                    }
                    let mut dests = vec![ref_pos[r]];
                    if r > 0 {
                        dests.push(ref_pos[r - 1] + 1);
                    }
                    for dest in dests {
                        let dest = dest.min(current.len());
                        if dest >= start && dest <= start + len {
                            continue;
                        }
                        let moved = apply_shift(&current, start, len, dest);
                        let (d, _, _) = align(&moved, reference);
                        if d < dist && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                            best = Some((d, moved));
                        }
                    }
                }
            }
        }
        let Some((_, moved)) = best else { break };
        current = moved;
        shifts += 1;
        (dist, ref_pos, matched) = align(&current, reference);
    }
    (dist, shifts)
}

/// Corpus TER ×100: total edits over total reference words.
pub fn ter_corpus<W: PartialEq + Clone>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    check_aligned(hyps.len(), refs.len())?;
    let mut edits = 0usize;
    let mut ref_words = 0usize;
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(Error::Metric(format!("reference {} is empty", i + 1)));
        }
        let (d, s) = ter_edits(h, r);
        edits += d + s;
        ref_words += r.len();
    }
    if ref_words == 0 {
        return Err(Error::Metric("no references".into()));
    }
    Ok(100.0 * edits as f64 / ref_words as f64)
}
