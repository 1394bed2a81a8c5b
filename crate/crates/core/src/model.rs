//! The attentive encoder-decoder: embeddings, LSTM stacks, encoder attention,
//! decoder self-attention, the dual fusion layer and the tied softmax.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderAttention, FuseLayer, ScoreKind, SelfAttention};
use crate::corpus::{Batch, TokenId};
use crate::error::{Error, Result};
use crate::recurrent::{encode_sequence, EncoderMemory, LstmLayer, LstmStack, LstmState};
use crate::tensor::{
    softmax_stable, uniform_init, Dropout, Gradients, Graph, NodeId, ParamId, ParameterSet, Real, Tensor, INIT_HIGH,
    INIT_LOW,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub units: usize,
    pub embedding_dim: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub score: ScoreKind,
    pub dropout: f64,
    pub max_len: usize,
    /// Initialize the LSTM forget-gate bias to 0 instead of 1.
    #[serde(default)]
    pub strict_zero_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            units: 1000,
            embedding_dim: 1000,
            source_vocab_size: 50_000,
            target_vocab_size: 50_000,
            score: ScoreKind::Dot,
            dropout: 0.5,
            max_len: 50,
            strict_zero_bias: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and examples.
    pub fn tiny(vocab: usize, units: usize, layers: usize, score: ScoreKind) -> Self {
        ModelConfig {
            layers,
            units,
            embedding_dim: units,
            source_vocab_size: vocab,
            target_vocab_size: vocab,
            score,
            dropout: 0.0,
            max_len: 50,
            strict_zero_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("model needs at least one layer".into());
        }
        if self.units == 0 {
            return fail("units must be positive".into());
        }
        if self.embedding_dim != self.units {
            return fail(format!(
                "embedding_dim ({}) must equal units ({}) for the tied output projection",
                self.embedding_dim, self.units
            ));
        }
        for (side, v) in [("source", self.source_vocab_size), ("target", self.target_vocab_size)] {
            if v < 5 {
                return fail(format!("{side} vocabulary size {v} is below the minimum of 5"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }
}

/// Number of trainable scalars for `config`, with the output projection
/// shared with the target embedding.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let n = config.units;
    let lstm = |input: usize| 4 * n * (input + n) + 4 * n;
    let stack = lstm(config.embedding_dim) + (config.layers - 1) * lstm(n);
    let fuse = 2 * n * n + n;
    let w_a = EncoderAttention::weight_shape(config.score, n).map_or(0, |[r, c]| r * c);
    Ok(config.source_vocab_size * config.embedding_dim
        + config.target_vocab_size * config.embedding_dim
        + 2 * stack
        + w_a
        + 3 * fuse
        + n * n
        + n
        + config.target_vocab_size)
}

/// Graph nodes produced by one decoder step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepNodes {
    /// Top-layer decoder state `h_t`.
    pub h_dec: NodeId,
    /// Encoder-attended state `h''`.
    pub h_dd: NodeId,
    /// Self-attended state `h'`.
    pub h_p: NodeId,
    /// Fused state `h†`.
    pub h_dag: NodeId,
    pub logits: NodeId,
    pub encoder_weights: NodeId,
}

/// Plain values of one decoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub h_dd: Tensor<T>,
    pub h_p: Tensor<T>,
    pub h_dag: Tensor<T>,
    pub dist: Tensor<T>,
}

/// Past top-layer decoder states with their (query-independent) self
/// attention scores.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecoderTrace {
    pub states: Vec<NodeId>,
    pub scores: Vec<NodeId>,
}

impl DecoderTrace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Summed NLL and gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub nll_sum: f64,
    pub tokens: usize,
    pub grads: Gradients<T>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
    src_embedding: ParamId,
    tgt_embedding: ParamId,
    encoder: LstmStack,
    decoder: LstmStack,
    encoder_attention: EncoderAttention,
    enc_fuse: FuseLayer,
    self_attention: SelfAttention,
    self_fuse: FuseLayer,
    dual_fuse: FuseLayer,
    out_bias: ParamId,
}

/// What a parameter tensor is, for initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Weight,
    Bias,
    LstmBias,
}

impl<T: Real> Seq2Seq<T> {
    /// Weights uniform in `[-0.05, 0.05]`, biases zero except the LSTM
    /// forget gates (1.0 unless `strict_zero_bias`).
    pub fn new<R: RngCore + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::new_with_range(config, INIT_LOW, INIT_HIGH, rng)
    }

    /// Like [`Seq2Seq::new`] with a custom weight range.
    pub fn new_with_range<R: RngCore + ?Sized>(config: ModelConfig, low: f64, high: f64, rng: &mut R) -> Result<Self> {
        let n = config.units;
        let forget = if config.strict_zero_bias { 0.0 } else { 1.0 };
        Self::build(config, |slot, shape| match slot {
            Slot::Weight => uniform_init(shape, low, high, rng),
            Slot::Bias => Ok(Tensor::zeros(shape)),
            Slot::LstmBias => {
                let mut b = Tensor::zeros(shape);
                b.data_mut()[n..2 * n].fill(T::lit(forget));
                Ok(b)
            }
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, shape| Ok(Tensor::zeros(shape)))
    }

    /// Rebuilds a model from named tensors; every expected name must be
    /// present exactly once with the expected shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut seen = vec![false; model.params.len()];
        for (name, value) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            let slot = &mut model.params.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Checkpoint(format!("tensor {name:?} appears twice")));
            }
            *slot = value;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            let name = &model.params.iter().nth(missing).expect("index in range").name;
            return Err(Error::Checkpoint(format!("missing tensor {name:?}")));
        }
        Ok(model)
    }

    fn build(config: ModelConfig, mut init: impl FnMut(Slot, &[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let n = config.units;
        let mut params = ParameterSet::new();
        let src_embedding = params.add(
            "src_embedding",
            init(Slot::Weight, &[config.source_vocab_size, config.embedding_dim])?,
        )?;
        let tgt_embedding = params.add(
            "tgt_embedding",
            init(Slot::Weight, &[config.target_vocab_size, config.embedding_dim])?,
        )?;
        let mut stack = |side: &str, params: &mut ParameterSet<T>| -> Result<LstmStack> {
            let mut layers = Vec::with_capacity(config.layers);
            for k in 0..config.layers {
                let input = if k == 0 { config.embedding_dim } else { n };
                let w = init(Slot::Weight, &LstmLayer::weight_shape(input, n))?;
                let b = init(Slot::LstmBias, &[4 * n])?;
                layers.push(LstmLayer::register(params, &format!("{side}.l{}", k + 1), w, b)?);
            }
            Ok(LstmStack { layers })
        };
        let encoder = stack("encoder", &mut params)?;
        let decoder = stack("decoder", &mut params)?;
        let w_a = match EncoderAttention::weight_shape(config.score, n) {
            Some(shape) => Some(params.add("attn.w_a", init(Slot::Weight, &shape)?)?),
            None => None,
        };
        let mut fuse = |name: &str, params: &mut ParameterSet<T>| -> Result<FuseLayer> {
            let w = init(Slot::Weight, &[n, 2 * n])?;
            let b = init(Slot::Bias, &[n])?;
            FuseLayer::register(params, name, w, b)
        };
        let enc_fuse = fuse("enc_fuse", &mut params)?;
        let self_fuse = fuse("self_fuse", &mut params)?;
        let dual_fuse = fuse("dual_fuse", &mut params)?;
        let self_attention = SelfAttention {
            w_s: params.add("self_score.w_s", init(Slot::Weight, &[n, n])?)?,
            v_s: params.add("self_score.v_s", init(Slot::Weight, &[n])?)?,
        };
        let out_bias = params.add("out.b", init(Slot::Bias, &[config.target_vocab_size])?)?;
        Ok(Seq2Seq {
            encoder_attention: EncoderAttention {
                kind: config.score,
                w_a,
            },
            config,
            params,
            src_embedding,
            tgt_embedding,
            encoder,
            decoder,
            enc_fuse,
            self_attention,
            self_fuse,
            dual_fuse,
            out_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// The target embedding, which doubles as the output projection.
    pub fn tied_embedding(&self) -> ParamId {
        self.tgt_embedding
    }

    pub fn source_embedding(&self) -> ParamId {
        self.src_embedding
    }

    /// Same architecture with values converted to `U`; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            src_embedding: self.src_embedding,
            tgt_embedding: self.tgt_embedding,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_attention: self.encoder_attention.clone(),
            enc_fuse: self.enc_fuse.clone(),
            self_attention: self.self_attention.clone(),
            self_fuse: self.self_fuse.clone(),
            dual_fuse: self.dual_fuse.clone(),
            out_bias: self.out_bias,
        }
    }

    /// Evaluates the same architecture against a different set of values,
    /// e.g. a perturbed copy during gradient checking.
    pub fn with_params(&self, params: ParameterSet<T>) -> Result<Self> {
        let named = params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self::from_named(self.config.clone(), named)
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        source_row: &[TokenId],
        dropout: &mut Dropout<'_>,
    ) -> Result<EncoderMemory> {
        for &id in source_row {
            if id >= self.config.source_vocab_size {
                return Err(Error::shape(
                    "encode",
                    format!("source id {id} outside vocabulary of {}", self.config.source_vocab_size),
                ));
            }
        }
        encode_sequence(g, self.src_embedding, &self.encoder, source_row, dropout)
    }

    /// One decoder step: embed `prev_token`, advance the stack, attend over
    /// the encoder memory and the decoder's own past states, fuse, and
    /// project through the tied embedding. Appends `h_t` to `trace`.
    pub fn decoder_timestep(
        &self,
        g: &mut Graph<'_, T>,
        prev_token: TokenId,
        state: &LstmState,
        memory: &EncoderMemory,
        trace: &mut DecoderTrace,
        dropout: &mut Dropout<'_>,
    ) -> Result<(StepNodes, LstmState)> {
        if memory.is_empty() {
            return Err(Error::EmptySource);
        }
        let x = g.row(self.tgt_embedding, prev_token)?;
        let (h, next_state) = self.decoder.step(g, x, state, dropout)?;

        let (encoder_weights, c_enc) = self.encoder_attention.attend(g, &memory.states, h)?;
        let h_dd = self.enc_fuse.apply(g, h, c_enc)?;

        let c_dec = if trace.is_empty() {
            g.input(Tensor::zeros(&[self.config.units]))
        } else {
            let scores = g.stack(&trace.scores)?;
            let weights = g.softmax(scores, None)?;
            g.weighted_sum(weights, &trace.states)?
        };
        let h_p = self.self_fuse.apply(g, h, c_dec)?;
        let h_dag = self.dual_fuse.apply(g, h_dd, h_p)?;

        let dropped = dropout.apply(g, h_dag)?;
        let (e, b) = (g.param(self.tgt_embedding), g.param(self.out_bias));
        let logits = g.affine(e, dropped, b)?;

        let score = self.self_attention.score(g, h)?;
        trace.states.push(h);
        trace.scores.push(score);
        Ok((
            StepNodes {
                h_dec: h,
                h_dd,
                h_p,
                h_dag,
                logits,
                encoder_weights,
            },
            next_state,
        ))
    }

    /// Teacher-forced summed NLL of one sentence. `target_in` starts with
    /// BOS; positions where `target_mask` is false are skipped. Returns the
    /// loss node and the number of scored tokens, or `None` when nothing is
    /// scored.
    pub fn sentence_nll(
        &self,
        g: &mut Graph<'_, T>,
        source_row: &[TokenId],
        target_in: &[TokenId],
        target_out: &[TokenId],
        target_mask: &[bool],
        dropout: &mut Dropout<'_>,
    ) -> Result<Option<(NodeId, usize)>> {
        let memory = self.encode(g, source_row, dropout)?;
        let mut state = memory.final_state.clone();
        let mut trace = DecoderTrace::default();
        let mut terms = Vec::new();
        let steps = target_mask.iter().rposition(|&m| m).map_or(0, |p| p + 1);
        for t in 0..steps {
            let (nodes, next) = self.decoder_timestep(g, target_in[t], &state, &memory, &mut trace, dropout)?;
            state = next;
            if target_mask[t] {
                terms.push(g.nll(nodes.logits, target_out[t])?);
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let count = terms.len();
        Ok(Some((g.sum(&terms)?, count)))
    }

    /// Summed NLL over a batch and its gradient. With `rng` present dropout
    /// is active at the configured rate.
    pub fn batch_loss_and_grads(&self, batch: &Batch, mut rng: Option<&mut dyn RngCore>) -> Result<BatchLoss<T>> {
        let mut grads = Gradients::zeros_for(&self.params);
        let mut nll_sum = 0.0;
        let mut tokens = 0;
        for i in 0..batch.len() {
            let mut dropout = match rng.as_deref_mut() {
                Some(r) => Dropout::training(self.config.dropout, r)?,
                None => Dropout::inference(),
            };
            let mut g = Graph::new(&self.params);
            let scored = self.sentence_nll(
                &mut g,
                &batch.source[i],
                &batch.target[i],
                &batch.target_out[i],
                &batch.target_mask[i],
                &mut dropout,
            )?;
            if let Some((loss, count)) = scored {
                nll_sum += g.value(loss).item().as_f64();
                tokens += count;
                g.backward(loss, &mut grads)?;
            }
        }
        Ok(BatchLoss { nll_sum, tokens, grads })
    }

    /// Summed NLL and scored-token count without dropout or gradients.
    pub fn nll_sum(&self, batch: &Batch) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut tokens = 0;
        for i in 0..batch.len() {
            let mut g = Graph::new(&self.params);
            let scored = self.sentence_nll(
                &mut g,
                &batch.source[i],
                &batch.target[i],
                &batch.target_out[i],
                &batch.target_mask[i],
                &mut Dropout::inference(),
            )?;
            if let Some((loss, count)) = scored {
                total += g.value(loss).item().as_f64();
                tokens += count;
            }
        }
        Ok((total, tokens))
    }

    /// Token-averaged NLL of a batch (inference mode).
    pub fn sequence_nll(&self, batch: &Batch) -> Result<f64> {
        let (total, tokens) = self.nll_sum(batch)?;
        if tokens == 0 {
            return Err(Error::Metric("batch has no scored target tokens".into()));
        }
        Ok(total / tokens as f64)
    }

    /// `softmax(E h† + b)`.
    pub fn output_distribution(&self, h_dag: &Tensor<T>) -> Result<Tensor<T>> {
        let e = self.params.value(self.tgt_embedding);
        let b = self.params.value(self.out_bias);
        softmax_stable(&crate::tensor::affine(h_dag, e, b)?, None)
    }

    /// Runs the decoder over `prefix` (teacher-forced, inference mode) and
    /// returns every step's intermediate values. `prefix[0]` is usually BOS.
    pub fn step_outputs(&self, source_row: &[TokenId], prefix: &[TokenId]) -> Result<Vec<StepOutput<T>>> {
        let mut g = Graph::new(&self.params);
        let mut dropout = Dropout::inference();
        let memory = self.encode(&mut g, source_row, &mut dropout)?;
        let mut state = memory.final_state.clone();
        let mut trace = DecoderTrace::default();
        let mut out = Vec::with_capacity(prefix.len());
        for &tok in prefix {
            let (nodes, next) = self.decoder_timestep(&mut g, tok, &state, &memory, &mut trace, &mut dropout)?;
            state = next;
            out.push(StepOutput {
                h_dd: g.value(nodes.h_dd).clone(),
                h_p: g.value(nodes.h_p).clone(),
                h_dag: g.value(nodes.h_dag).clone(),
                dist: softmax_stable(g.value(nodes.logits), None)?,
            });
        }
        Ok(out)
    }
}
