//! Greedy translation.

use std::fs;
use std::path::Path;

use log::warn;

use crate::corpus::{read_lines, tokenize, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderTrace, Seq2Seq};
use crate::tensor::{Dropout, Graph, Real};
use crate::training::Checkpoint;

pub const DEFAULT_MAX_OUT_LEN: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationHypothesis {
    /// Emitted ids without BOS, EOS or PAD.
    pub tokens: Vec<TokenId>,
    /// Sum of log probabilities of every emitted id, including a final EOS.
    pub score: f64,
    /// Set when the length cap stopped decoding before EOS.
    pub truncated: bool,
}

/// Picks the most probable id, never PAD or BOS; ties go to the lowest id.
pub fn greedy_choice(log_probs: &[f64]) -> TokenId {
    let mut best = None;
    for (id, &lp) in log_probs.iter().enumerate() {
        if id == PAD || id == BOS {
            continue;
        }
        if best.is_none_or(|(_, b)| lp > b) {
            best = Some((id, lp));
        }
    }
    best.expect("vocabulary has more than the reserved ids").0
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - log_z).collect()
}

/// Greedy decoding that also returns the log distribution of every step.
pub fn greedy_decode_traced<T: Real>(
    model: &Seq2Seq<T>,
    source_ids: &[TokenId],
    max_out_len: usize,
) -> Result<(TranslationHypothesis, Vec<Vec<f64>>)> {
    let content: Vec<TokenId> = source_ids
        .iter()
        .copied()
        .filter(|&id| id != PAD && id != EOS)
        .collect();
    if content.is_empty() {
        return Err(Error::EmptySource);
    }
    let cap = model.config().max_len;
    let source = if content.len() > cap {
        warn!("source of {} tokens truncated to {cap}", content.len());
        &content[..cap]
    } else {
        &content[..]
    };

    let mut g = Graph::new(model.params());
    let mut dropout = Dropout::inference();
    let memory = model.encode(&mut g, source, &mut dropout)?;
    let mut state = memory.final_state.clone();
    let mut trace = DecoderTrace::default();
    let mut hyp = TranslationHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        truncated: true,
    };
    let mut steps = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_out_len {
        let (nodes, next) = model.decoder_timestep(&mut g, prev, &state, &memory, &mut trace, &mut dropout)?;
        state = next;
        let log_probs = log_softmax(&g.value(nodes.logits).to_f64_vec());
        let id = greedy_choice(&log_probs);
        hyp.score += log_probs[id];
        steps.push(log_probs);
        if id == EOS {
            hyp.truncated = false;
            break;
        }
        hyp.tokens.push(id);
        prev = id;
    }
    Ok((hyp, steps))
}

/// Encodes `source_ids` and emits the argmax token at every step until EOS
/// or `max_out_len` tokens.
pub fn greedy_decode<T: Real>(
    model: &Seq2Seq<T>,
    source_ids: &[TokenId],
    max_out_len: usize,
) -> Result<TranslationHypothesis> {
    greedy_decode_traced(model, source_ids, max_out_len).map(|(h, _)| h)
}

/// Translates one whitespace-tokenized line; an empty line yields an empty
/// translation.
pub fn translate_line(checkpoint: &Checkpoint, line: &str, max_out_len: usize) -> Result<String> {
    let ids: Vec<TokenId> = tokenize(line).iter().map(|t| checkpoint.source_vocab.id(t)).collect();
    if ids.is_empty() {
        return Ok(String::new());
    }
    let hyp = greedy_decode(&checkpoint.model, &ids, max_out_len)?;
    Ok(checkpoint.target_vocab.decode(&hyp.tokens).join(" "))
}

/// Translates `input` line by line into `output`; returns the number of
/// lines written.
pub fn translate_corpus(input: &Path, checkpoint: &Checkpoint, output: &Path, max_out_len: usize) -> Result<usize> {
    let lines = read_lines(input)?;
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let text = translate_line(checkpoint, line, max_out_len).map_err(|e| Error::AtLine {
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push_str(&text);
        out.push('\n');
    }
    fs::write(output, out).map_err(|e| Error::io(output, e))?;
    Ok(lines.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ScoreKind;
    use crate::corpus::{Vocabulary, UNK};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rigged(favourite: TokenId) -> Seq2Seq<f64> {
        let mut model = Seq2Seq::zeros(ModelConfig::tiny(6, 2, 1, ScoreKind::Dot)).unwrap();
        let b = model.params().id("out.b").unwrap();
        model.params_mut().get_mut(b).value.data_mut()[favourite] = 5.0;
        model
    }

    #[test]
    fn eos_first_gives_empty_translation() {
        let hyp = greedy_decode(&rigged(EOS), &[4, 5], 100).unwrap();
        assert!(hyp.tokens.is_empty());
        assert!(!hyp.truncated);
        let p = 5f64.exp() / (5f64.exp() + 5.0);
        assert!((hyp.score - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn never_eos_hits_the_cap() {
        let hyp = greedy_decode(&rigged(4), &[4], 7).unwrap();
        assert_eq!(hyp.tokens, vec![4; 7]);
        assert!(hyp.truncated);
    }

    #[test]
    fn reserved_ids_are_never_chosen() {
        assert_eq!(greedy_choice(&[0.0, -1.0, 0.0, -2.0]), UNK);
        assert_eq!(greedy_choice(&[0.0, -3.0, 0.0, -3.0, -3.0]), UNK);
        assert_eq!(greedy_choice(&[-9.0, -3.0, -9.0, -3.0, -1.0]), 4);
        assert!(greedy_decode(&rigged(PAD), &[4], 5)
            .unwrap()
            .tokens
            .iter()
            .all(|&t| t != PAD));
    }

    #[test]
    fn empty_source_is_rejected() {
        assert!(matches!(greedy_decode(&rigged(4), &[], 5), Err(Error::EmptySource)));
        assert!(matches!(
            greedy_decode(&rigged(4), &[PAD, PAD], 5),
            Err(Error::EmptySource)
        ));
    }

    #[test]
    fn emitted_ids_maximize_each_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Seq2Seq::<f32>::new_with_range(ModelConfig::tiny(9, 4, 2, ScoreKind::General), -1.0, 1.0, &mut rng)
            .unwrap();
        let (hyp, steps) = greedy_decode_traced(&model, &[4, 7, 8], 12).unwrap();
        assert!(hyp.tokens.len() <= 12);
        let mut emitted = hyp.tokens.clone();
        if !hyp.truncated {
            emitted.push(EOS);
        }
        assert_eq!(emitted.len(), steps.len());
        let mut total = 0.0;
        for (&id, lp) in emitted.iter().zip(&steps) {
            for (j, &v) in lp.iter().enumerate() {
                if j != PAD && j != BOS {
                    assert!(v <= lp[id]);
                }
            }
            total += lp[id];
        }
        assert!((total - hyp.score).abs() < 1e-9);
    }

    #[test]
    fn corpus_translation_preserves_lines() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::from_tokens(["x", "y"].map(String::from)).unwrap();
        let model = rigged(4).cast::<f32>();
        let ck = Checkpoint::new(model, vocab.clone(), vocab).unwrap();
        let input = dir.path().join("in.txt");
        let (out1, out2) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
        fs::write(&input, "x y\ny\n\nx\n").unwrap();
        assert_eq!(translate_corpus(&input, &ck, &out1, 3).unwrap(), 4);
        translate_corpus(&input, &ck, &out2, 3).unwrap();
        let text = fs::read_to_string(&out1).unwrap();
        assert_eq!(text, "x x x\nx x x\n\nx x x\n");
        assert_eq!(text, fs::read_to_string(&out2).unwrap());

        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        assert_eq!(translate_corpus(&empty, &ck, &out1, 3).unwrap(), 0);
        assert_eq!(fs::read_to_string(&out1).unwrap(), "");
    }
}
