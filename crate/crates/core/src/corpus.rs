//! Parallel-corpus ingestion: vocabulary, numericalization, padding and batching.
//!
//! Input text is pre-tokenized; a sentence is a line and tokens are separated
//! by whitespace.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_VOCAB_CAP: usize = 50_000;
pub const DEFAULT_MAX_LEN: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const IDIOM_TEST_SIZE: usize = 2_200;

/// Token/id mapping. Ids 0..4 are the reserved specials; every other entry
/// is a corpus token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keeps the `cap` most frequent tokens; ties go to the lexicographically
    /// smaller token.
    pub fn build<I, S, W>(sentences: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = W>,
        W: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_ref().to_owned()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Builds a vocabulary whose non-special entries are `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!("bad token {tok:?}")));
            }
            let id = id_to_token.len();
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
            id_to_token.push(tok);
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    /// Number of entries including the four specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// One token per line; line `i` (0-based) holds id `i + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| {
            let line = e.as_bytes()[..e.utf8_error().valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count()
                + 1;
            Error::InvalidUtf8 {
                path: path.to_owned(),
                line,
            }
        })?;
        Self::from_file_string(&text)
    }

    /// SHA-256 of the serialized vocabulary file, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    /// Maps ids back to tokens, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect()
    }
}

/// Token ids with a trailing EOS; unknown tokens become UNK.
pub fn encode_sentence<W: AsRef<str>>(tokens: &[W], vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = tokens.iter().map(|t| vocab.id(t.as_ref())).collect();
    ids.push(EOS);
    ids
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// A numericalized sentence pair; each side ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
}

impl SentencePair {
    pub fn encode<W: AsRef<str>>(
        source: &[W],
        target: &[W],
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
    ) -> Self {
        SentencePair {
            source_ids: encode_sentence(source, source_vocab),
            target_ids: encode_sentence(target, target_vocab),
        }
    }

    /// Source token count, not counting EOS.
    pub fn source_len(&self) -> usize {
        content_len(&self.source_ids)
    }

    pub fn target_len(&self) -> usize {
        content_len(&self.target_ids)
    }
}

fn content_len(ids: &[TokenId]) -> usize {
    ids.iter().filter(|&&id| id != EOS && id != PAD).count()
}

fn content(ids: &[TokenId]) -> impl Iterator<Item = TokenId> + '_ {
    ids.iter().copied().filter(|&id| id != EOS && id != PAD)
}

/// A pair padded to fixed width.
///
/// `source` has width `max_len` and holds the source tokens only (the encoder
/// does not consume EOS). `target` has width `max_len + 1` and holds the
/// EOS-terminated target, i.e. the gold outputs of the decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl PaddedPair {
    pub fn source_len(&self) -> usize {
        self.source.iter().filter(|&&id| id != PAD).count()
    }

    /// Target length including EOS.
    pub fn target_len(&self) -> usize {
        self.target.iter().filter(|&&id| id != PAD).count()
    }

    pub fn source_mask(&self) -> Vec<bool> {
        self.source.iter().map(|&id| id != PAD).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Over-length pairs (and pairs with an empty source) are dropped.
    Training,
    /// Over-length sides are truncated with a warning.
    Translation,
}

pub fn filter_and_pad(pairs: &[SentencePair], max_len: usize, mode: PadMode) -> Vec<PaddedPair> {
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let (ls, lt) = (p.source_len(), p.target_len());
        if mode == PadMode::Training && (ls > max_len || lt > max_len || ls == 0) {
            continue;
        }
        if mode == PadMode::Translation && (ls > max_len || lt > max_len) {
            warn!("pair {i}: truncating ({ls}, {lt}) tokens to {max_len}");
        }
        let mut source: Vec<TokenId> = content(&p.source_ids).take(max_len).collect();
        source.resize(max_len, PAD);
        let mut target: Vec<TokenId> = content(&p.target_ids).take(max_len).collect();
        target.push(EOS);
        target.resize(max_len + 1, PAD);
        out.push(PaddedPair { source, target });
    }
    out
}

/// Seeded uniform sample of `test_n` items without replacement; the rest is
/// returned as extra training data. Both parts keep the input order.
pub fn split_idiom_dataset<T: Clone>(items: &[T], test_n: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < test_n {
        return Err(Error::SplitTooSmall {
            needed: test_n,
            got: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; items.len()];
    for i in index::sample(&mut rng, items.len(), test_n) {
        chosen[i] = true;
    }
    let mut test = Vec::with_capacity(test_n);
    let mut rest = Vec::with_capacity(items.len() - test_n);
    for (item, &c) in items.iter().zip(&chosen) {
        if c {
            test.push(item.clone());
        } else {
            rest.push(item.clone());
        }
    }
    Ok((test, rest))
}

/// Reads a UTF-8 text file as lines (without terminators).
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut chunks: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if chunks.last().is_some_and(|c| c.is_empty()) {
        chunks.pop();
    }
    for (i, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk.strip_suffix(b"\r").unwrap_or(chunk);
        let line = std::str::from_utf8(chunk).map_err(|_| Error::InvalidUtf8 {
            path: path.to_owned(),
            line: i + 1,
        })?;
        lines.push(line.to_owned());
    }
    Ok(lines)
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

/// Line `i` of each file forms pair `i`.
pub fn load_parallel(source: &Path, target: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let src = read_tokenized(source)?;
    let tgt = read_tokenized(target)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// A mini-batch of padded id matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// `batch × max_len` source ids.
    pub source: Vec<Vec<TokenId>>,
    /// `batch × (max_len + 1)` decoder inputs: BOS followed by the target.
    pub target: Vec<Vec<TokenId>>,
    /// `batch × (max_len + 1)` gold outputs: the target followed by EOS.
    pub target_out: Vec<Vec<TokenId>>,
    pub source_mask: Vec<Vec<bool>>,
    /// Marks positions of `target_out` that count towards the loss.
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&PaddedPair]) -> Self {
        let mut b = Batch {
            source: Vec::with_capacity(pairs.len()),
            target: Vec::with_capacity(pairs.len()),
            target_out: Vec::with_capacity(pairs.len()),
            source_mask: Vec::with_capacity(pairs.len()),
            target_mask: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let mut input = Vec::with_capacity(p.target.len());
            input.push(BOS);
            input.extend(
                p.target[..p.target.len() - 1]
                    .iter()
                    .map(|&id| if id == EOS { PAD } else { id }),
            );
            b.target_mask.push(p.target.iter().map(|&id| id != PAD).collect());
            b.source_mask.push(p.source_mask());
            b.source.push(p.source.clone());
            b.target.push(input);
            b.target_out.push(p.target.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Number of target positions contributing to the loss.
    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// Shuffles `pairs` with `shuffle_seed` and cuts them into batches; the final
/// partial batch is kept.
pub fn batches(pairs: &[PaddedPair], batch_size: usize, shuffle_seed: u64) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&PaddedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&refs)
        })
        .collect()
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(pairs: &[PaddedPair], batch_size: usize) -> Vec<Batch> {
    pairs
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::from_pairs(&chunk.iter().collect::<Vec<_>>()))
        .collect()
}
