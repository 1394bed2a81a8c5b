//! LSTM cells, stacked layers and the source encoder.

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Dropout, Graph, NodeId, ParamId, ParameterSet, Real, Tensor};

/// One LSTM layer. The weight is `[4n, in + n]` applied to `[x; h]`, with
/// gate blocks ordered input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub units: usize,
}

impl LstmLayer {
    pub fn register<T: Real>(
        params: &mut ParameterSet<T>,
        prefix: &str,
        weight: Tensor<T>,
        bias: Tensor<T>,
    ) -> Result<Self> {
        let units = bias.len() / 4;
        if bias.len() != 4 * units || weight.rows() != 4 * units || weight.cols() <= units {
            return Err(Error::shape(
                "lstm",
                format!("weight {:?} / bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        let input_dim = weight.cols() - units;
        Ok(LstmLayer {
            weight: params.add(format!("{prefix}.w"), weight)?,
            bias: params.add(format!("{prefix}.b"), bias)?,
            input_dim,
            units,
        })
    }

    pub fn weight_shape(input_dim: usize, units: usize) -> [usize; 2] {
        [4 * units, input_dim + units]
    }
}

/// `(h, c) -> (h', c')` for a single layer.
pub fn lstm_cell_step<T: Real>(
    g: &mut Graph<'_, T>,
    layer: &LstmLayer,
    x: NodeId,
    prev_h: NodeId,
    prev_c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = layer.units;
    if g.value(x).len() != layer.input_dim || g.value(prev_h).len() != n || g.value(prev_c).len() != n {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x {:?}, h {:?}, c {:?} for layer ({} -> {n})",
                g.value(x).shape(),
                g.value(prev_h).shape(),
                g.value(prev_c).shape(),
                layer.input_dim
            ),
        ));
    }
    let xh = g.concat(&[x, prev_h])?;
    let (w, b) = (g.param(layer.weight), g.param(layer.bias));
    let z = g.affine(w, xh, b)?;
    let zi = g.slice(z, 0, n)?;
    let zf = g.slice(z, n, n)?;
    let zo = g.slice(z, 2 * n, n)?;
    let zg = g.slice(z, 3 * n, n)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let keep = g.mul(f, prev_c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Per-layer `(h, c)` node pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl LstmState {
    pub fn zeros<T: Real>(g: &mut Graph<'_, T>, layers: usize, units: usize) -> Self {
        let layers = (0..layers)
            .map(|_| (g.input(Tensor::zeros(&[units])), g.input(Tensor::zeros(&[units]))))
            .collect();
        LstmState { layers }
    }

    pub fn top_h(&self) -> NodeId {
        self.layers.last().expect("at least one layer").0
    }

    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> Vec<(Tensor<T>, Tensor<T>)> {
        self.layers
            .iter()
            .map(|&(h, c)| (g.value(h).clone(), g.value(c).clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn units(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<'_, T>) -> LstmState {
        LstmState::zeros(g, self.layers.len(), self.units())
    }

    /// Runs one time step through every layer. Dropout is applied to each
    /// layer's input (the embedding for layer 1, the layer below otherwise),
    /// never to the recurrent connections. Returns the top layer's `h`.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        state: &LstmState,
        dropout: &mut Dropout<'_>,
    ) -> Result<(NodeId, LstmState)> {
        if state.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "stack_step",
                format!(
                    "{} state layers for {} LSTM layers",
                    state.layers.len(),
                    self.layers.len()
                ),
            ));
        }
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &(h, c)) in self.layers.iter().zip(&state.layers) {
            let dropped = dropout.apply(g, input)?;
            let (h2, c2) = lstm_cell_step(g, layer, dropped, h, c)?;
            next.push((h2, c2));
            input = h2;
        }
        Ok((input, LstmState { layers: next }))
    }
}

/// All top-layer encoder states plus the state after the last real token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderMemory {
    /// Top-layer `h` for each unmasked position, in order.
    pub states: Vec<NodeId>,
    /// Source positions the entries of `states` came from.
    pub positions: Vec<usize>,
    /// `true` where the padded source row holds a real token.
    pub mask: Vec<bool>,
    pub final_state: LstmState,
}

impl EncoderMemory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `[L_max, n]` matrix with zero rows at masked positions.
    pub fn states_matrix<T: Real>(&self, g: &Graph<'_, T>) -> Tensor<T> {
        let n = g.value(self.states[0]).len();
        let mut m = Tensor::zeros(&[self.mask.len(), n]);
        for (&node, &pos) in self.states.iter().zip(&self.positions) {
            m.row_mut(pos).copy_from_slice(g.value(node).data());
        }
        m
    }
}

/// Reads a padded source row left to right from the zero state. PAD
/// positions leave the recurrent state untouched.
pub fn encode_sequence<T: Real>(
    g: &mut Graph<'_, T>,
    embedding: ParamId,
    stack: &LstmStack,
    source_row: &[TokenId],
    dropout: &mut Dropout<'_>,
) -> Result<EncoderMemory> {
    let mask: Vec<bool> = source_row.iter().map(|&id| id != PAD).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptySource);
    }
    let mut state = stack.zero_state(g);
    let mut states = Vec::new();
    let mut positions = Vec::new();
    for (pos, &id) in source_row.iter().enumerate() {
        if id == PAD {
            continue;
        }
        let x = g.row(embedding, id)?;
        let (top, next) = stack.step(g, x, &state, dropout)?;
        state = next;
        states.push(top);
        positions.push(pos);
    }
    Ok(EncoderMemory {
        states,
        positions,
        mask,
        final_state: state,
    })
}
