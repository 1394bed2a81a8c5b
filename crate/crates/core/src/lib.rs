//! Attentive neural machine translation.
//!
//! An LSTM encoder-decoder whose decoder attends both over the encoder's
//! hidden states and over its own previous hidden states, fused through a
//! tanh concatenation layer before the (embedding-tied) softmax. The crate
//! also carries the data pipeline, training loop with patience-based early
//! stopping, greedy decoding, and corpus-level BLEU/TER scoring.

pub mod attention;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
