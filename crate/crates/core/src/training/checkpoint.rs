//! Binary model files.
//!
//! Layout: `ANMT`, a little-endian `u32` version, a little-endian `u64`
//! header length, the UTF-8 JSON header, then every tensor as little-endian
//! `f32` values in header order. The header records the model configuration,
//! a hash of both vocabularies, the vocabularies themselves and the tensor
//! table. The output projection is the target embedding and is stored once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ANMT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

/// A trained model together with the vocabularies it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq<f32>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
    vocab: VocabEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabEntry {
    source: Vec<String>,
    target: Vec<String>,
}

/// Hash binding a checkpoint to its source and target vocabularies.
pub fn vocab_hash(source: &Vocabulary, target: &Vocabulary) -> String {
    let mut h = Sha256::new();
    h.update(source.content_hash().as_bytes());
    h.update(b"\n");
    h.update(target.content_hash().as_bytes());
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(model: Seq2Seq<f32>, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Result<Self> {
        let cfg = model.config();
        if source_vocab.size() != cfg.source_vocab_size || target_vocab.size() != cfg.target_vocab_size {
            return Err(Error::Config(format!(
                "vocabulary sizes ({}, {}) do not match model ({}, {})",
                source_vocab.size(),
                target_vocab.size(),
                cfg.source_vocab_size,
                cfg.target_vocab_size
            )));
        }
        Ok(Checkpoint {
            model,
            source_vocab,
            target_vocab,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for p in self.model.params().iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += 4 * p.value.len() as u64;
        }
        let header = Header {
            config: self.model.config().clone(),
            vocab_hash: vocab_hash(&self.source_vocab, &self.target_vocab),
            tensors,
            vocab: VocabEntry {
                source: self.source_vocab.tokens().to_vec(),
                target: self.target_vocab.tokens().to_vec(),
            },
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREAMBLE {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| bad(format!("corrupted header: {e}")))?;
        header.config.validate()?;

        let source_vocab = Vocabulary::from_tokens(header.vocab.source)?;
        let target_vocab = Vocabulary::from_tokens(header.vocab.target)?;
        if vocab_hash(&source_vocab, &target_vocab) != header.vocab_hash {
            return Err(bad("vocabulary hash mismatch".into()));
        }

        let payload = &bytes[header_end..];
        let mut expected_offset = 0u64;
        let mut named = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(bad(format!(
                    "tensor {:?} at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&c| c > 0)
                .ok_or_else(|| bad(format!("tensor {:?} has invalid shape {:?}", entry.name, entry.shape)))?;
            let start = expected_offset as usize;
            let end = count
                .checked_mul(4)
                .and_then(|b| b.checked_add(start))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(format!("truncated payload in tensor {:?}", entry.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            named.push((entry.name, Tensor::new(entry.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last tensor",
                payload.len() - expected_offset as usize
            )));
        }
        let model = Seq2Seq::from_named(header.config, named)?;
        Checkpoint::new(model, source_vocab, target_vocab)
    }

    /// Writes to a temporary sibling file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = temp_sibling(path);
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
