//! Score functions, masked attention weights, context vectors and the tanh
//! concatenation layer.
//!
//! Each operation comes in two flavours: a plain tensor function, and a
//! graph-recording layer used by the model so gradients flow through it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, dot};
use crate::tensor::{softmax_stable, Graph, NodeId, ParamId, ParameterSet, Real, Tensor};

/// Content function scoring an encoder state against the current decoder state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// `h_e · h_d`
    Dot,
    /// `h_e · (W_a h_d)`
    General,
    /// `w_a · [h_e; h_d]` with a single-row `w_a`
    Concat,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Dot => "dot",
            ScoreKind::General => "general",
            ScoreKind::Concat => "concat",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScoreKind::Dot),
            "general" => Ok(ScoreKind::General),
            "concat" => Ok(ScoreKind::Concat),
            other => Err(Error::Config(format!(
                "unknown score function {other:?} (expected dot, general or concat)"
            ))),
        }
    }
}

pub fn encoder_score<T: Real>(
    kind: ScoreKind,
    h_enc: &Tensor<T>,
    h_dec: &Tensor<T>,
    w_a: Option<&Tensor<T>>,
) -> Result<T> {
    let need_w = || w_a.ok_or_else(|| Error::Config(format!("{kind} score needs a W_a parameter")));
    match kind {
        ScoreKind::Dot => {
            if h_enc.len() != h_dec.len() {
                return Err(Error::shape(
                    "dot score",
                    format!("encoder width {} vs decoder width {}", h_enc.len(), h_dec.len()),
                ));
            }
            Ok(dot(h_enc.data(), h_dec.data()))
        }
        ScoreKind::General => {
            let projected = ops::matvec(need_w()?, h_dec)?;
            if projected.len() != h_enc.len() {
                return Err(Error::shape(
                    "general score",
                    format!("W_a h_d has width {}, h_e {}", projected.len(), h_enc.len()),
                ));
            }
            Ok(dot(h_enc.data(), projected.data()))
        }
        ScoreKind::Concat => {
            let w = need_w()?;
            let mut joined = h_enc.data().to_vec();
            joined.extend_from_slice(h_dec.data());
            if w.len() != joined.len() {
                return Err(Error::shape(
                    "concat score",
                    format!("w_a {:?} vs [h_e; h_d] of width {}", w.shape(), joined.len()),
                ));
            }
            Ok(dot(w.data(), &joined))
        }
    }
}

/// `v_s · tanh(W_s h)`; depends only on the candidate state.
pub fn self_score_single<T: Real>(h: &Tensor<T>, w_s: &Tensor<T>, v_s: &Tensor<T>) -> Result<T> {
    let hidden = ops::matvec(w_s, h)?;
    if hidden.len() != v_s.len() {
        return Err(Error::shape(
            "self score",
            format!("v_s {:?} vs W_s h of width {}", v_s.shape(), hidden.len()),
        ));
    }
    Ok(hidden.data().iter().zip(v_s.data()).map(|(&x, &v)| v * x.tanh()).sum())
}

pub fn attention_weights<T: Real>(scores: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    softmax_stable(scores, Some(mask))
}

/// `Σ_i weights[i] · states[i]` for `states` of shape `[k, n]`.
pub fn context_vector<T: Real>(weights: &Tensor<T>, states: &Tensor<T>) -> Result<Tensor<T>> {
    if !states.is_matrix() || states.rows() != weights.len() {
        return Err(Error::shape(
            "context_vector",
            format!("weights {:?} vs states {:?}", weights.shape(), states.shape()),
        ));
    }
    let mut out = vec![T::zero(); states.cols()];
    for (i, &a) in weights.data().iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (o, &s) in out.iter_mut().zip(states.row(i)) {
            *o += a * s;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// `tanh(W [a; b] + bias)`.
pub fn concat_fuse<T: Real>(a: &Tensor<T>, b: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut joined = a.data().to_vec();
    joined.extend_from_slice(b.data());
    let z = ops::affine(&Tensor::from_vec(joined), w, bias)?;
    Ok(z.map(|v| v.tanh()))
}

/// Graph layer for [`encoder_score`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderAttention {
    pub kind: ScoreKind,
    pub w_a: Option<ParamId>,
}

impl EncoderAttention {
    /// Shape of `W_a` for the given score function, if it has one.
    pub fn weight_shape(kind: ScoreKind, units: usize) -> Option<[usize; 2]> {
        match kind {
            ScoreKind::Dot => None,
            ScoreKind::General => Some([units, units]),
            ScoreKind::Concat => Some([1, 2 * units]),
        }
    }

    /// Scores every memory state against `query` and returns the attention
    /// weights and the resulting context vector.
    pub fn attend<T: Real>(&self, g: &mut Graph<'_, T>, memory: &[NodeId], query: NodeId) -> Result<(NodeId, NodeId)> {
        let scores = match self.kind {
            ScoreKind::Dot => memory.iter().map(|&h| g.dot(h, query)).collect::<Result<Vec<_>>>()?,
            ScoreKind::General => {
                let w = g.param(self.w_a.expect("general score has W_a"));
                let projected = g.matvec(w, query)?;
                memory
                    .iter()
                    .map(|&h| g.dot(h, projected))
                    .collect::<Result<Vec<_>>>()?
            }
            ScoreKind::Concat => {
                let w = g.param(self.w_a.expect("concat score has w_a"));
                memory
                    .iter()
                    .map(|&h| {
                        let joined = g.concat(&[h, query])?;
                        g.matvec(w, joined)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let stacked = g.stack(&scores)?;
        let weights = g.softmax(stacked, None)?;
        let context = g.weighted_sum(weights, memory)?;
        Ok((weights, context))
    }
}

/// Graph layer for [`self_score_single`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelfAttention {
    pub w_s: ParamId,
    pub v_s: ParamId,
}

impl SelfAttention {
    pub fn score<T: Real>(&self, g: &mut Graph<'_, T>, h: NodeId) -> Result<NodeId> {
        let (w, v) = (g.param(self.w_s), g.param(self.v_s));
        let proj = g.matvec(w, h)?;
        let act = g.tanh(proj);
        g.dot(v, act)
    }
}

/// Graph layer for [`concat_fuse`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuseLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl FuseLayer {
    pub fn register<T: Real>(params: &mut ParameterSet<T>, prefix: &str, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        Ok(FuseLayer {
            w: params.add(format!("{prefix}.w"), w)?,
            b: params.add(format!("{prefix}.b"), b)?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let joined = g.concat(&[a, b])?;
        let (w, bias) = (g.param(self.w), g.param(self.b));
        let z = g.affine(w, joined, bias)?;
        Ok(g.tanh(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(x.to_vec())
    }

    fn m(rows: usize, cols: usize, x: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![rows, cols], x).unwrap()
    }

    #[test]
    fn dot_scores() {
        let s = encoder_score(ScoreKind::Dot, &v(&[1.0, 0.0]), &v(&[1.0, 0.0]), None).unwrap();
        assert_eq!(s, 1.0);
        let s = encoder_score(ScoreKind::Dot, &v(&[1.0, 0.0]), &v(&[0.0, 1.0]), None).unwrap();
        assert_eq!(s, 0.0);
        assert!(encoder_score(ScoreKind::Dot, &v(&[1.0, 0.0]), &v(&[1.0]), None).is_err());
    }

    #[test]
    fn general_scores() {
        let eye = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (a, b) = (v(&[0.3, -1.2]), v(&[2.0, 0.5]));
        assert_eq!(
            encoder_score(ScoreKind::General, &a, &b, Some(&eye)).unwrap(),
            encoder_score(ScoreKind::Dot, &a, &b, None).unwrap()
        );
        // [1,2] · ([[0,1],[1,0]] [3,4]) = [1,2]·[4,3]
        let swap = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = encoder_score(ScoreKind::General, &v(&[1.0, 2.0]), &v(&[3.0, 4.0]), Some(&swap)).unwrap();
        assert_eq!(s, 10.0);
    }

    #[test]
    fn concat_score_is_scalar() {
        let w = m(1, 4, &[1.0, 0.0, 0.0, 2.0]);
        let s = encoder_score(ScoreKind::Concat, &v(&[3.0, 5.0]), &v(&[7.0, 0.5]), Some(&w)).unwrap();
        assert_eq!(s, 4.0);
    }

    #[test]
    fn self_score_examples() {
        let eye = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(self_score_single(&v(&[0.0, 0.0]), &eye, &v(&[0.4, 0.7])).unwrap(), 0.0);
        assert_eq!(self_score_single(&v(&[0.2, 0.9]), &eye, &v(&[0.0, 0.0])).unwrap(), 0.0);
        let s = self_score_single(&v(&[0.5, -0.5]), &eye, &v(&[1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(s, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn weights_examples() {
        assert_eq!(attention_weights(&v(&[3.7]), &[true]).unwrap().data(), &[1.0]);
        let w = attention_weights(&v(&[0.4, 0.4, 0.4, 0.4]), &[true; 4]).unwrap();
        for &p in w.data() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        let e = std::f64::consts::E;
        let w = attention_weights(&v(&[1.0, 2.0]), &[true, true]).unwrap();
        assert_abs_diff_eq!(w.data()[0], 1.0 / (1.0 + e), epsilon = 1e-12);
        assert_abs_diff_eq!(w.data()[1], e / (1.0 + e), epsilon = 1e-12);
    }

    #[test]
    fn context_examples() {
        let states = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            context_vector(&v(&[0.0, 0.0, 1.0]), &states).unwrap().data(),
            &[5.0, 6.0]
        );
        let c = context_vector(&v(&[0.5, 0.5]), &m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(c.data(), &[0.5, 0.5]);
        let c = context_vector(&v(&[0.25, 0.75]), &m(2, 2, &[4.0, 0.0, 0.0, 4.0])).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0]);
        assert!(context_vector(&v(&[1.0]), &states).is_err());
    }

    #[test]
    fn fuse_examples() {
        let out = concat_fuse(&v(&[0.0]), &v(&[0.0]), &m(1, 2, &[0.3, 0.4]), &v(&[0.0])).unwrap();
        assert_eq!(out.data(), &[0.0]);
        let out = concat_fuse(&v(&[5.0]), &v(&[-2.0]), &m(1, 2, &[0.0, 0.0]), &v(&[1.0])).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.7615941559557649, epsilon = 1e-12);
        let w = m(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let out = concat_fuse(&v(&[0.3, 9.0]), &v(&[9.0, -0.3]), &w, &v(&[0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.3f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[1], (-0.3f64).tanh(), epsilon = 1e-15);
        assert!(concat_fuse(&v(&[1.0]), &v(&[1.0]), &w, &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn score_kind_parsing() {
        assert_eq!("general".parse::<ScoreKind>().unwrap(), ScoreKind::General);
        assert!("luong".parse::<ScoreKind>().is_err());
        assert_eq!(ScoreKind::Concat.to_string(), "concat");
    }

    #[test]
    fn graph_attention_matches_tensor_path() {
        let mut ps = ParameterSet::<f64>::new();
        let w_a = ps.add("w_a", m(2, 2, &[0.1, -0.4, 0.8, 0.3])).unwrap();
        let layer = EncoderAttention {
            kind: ScoreKind::General,
            w_a: Some(w_a),
        };
        let mem = [v(&[0.2, 0.1]), v(&[-0.5, 0.9]), v(&[0.7, 0.7])];
        let q = v(&[0.6, -0.1]);
        let mut g = Graph::new(&ps);
        let nodes: Vec<_> = mem.iter().map(|t| g.input(t.clone())).collect();
        let qn = g.input(q.clone());
        let (wn, cn) = layer.attend(&mut g, &nodes, qn).unwrap();

        let scores: Vec<f64> = mem
            .iter()
            .map(|h| encoder_score(ScoreKind::General, h, &q, Some(ps.value(w_a))).unwrap())
            .collect();
        let weights = attention_weights(&v(&scores), &[true; 3]).unwrap();
        let states = m(3, 2, &[0.2, 0.1, -0.5, 0.9, 0.7, 0.7]);
        let ctx = context_vector(&weights, &states).unwrap();
        for (a, b) in g.value(wn).data().iter().zip(weights.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for (a, b) in g.value(cn).data().iter().zip(ctx.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }
}
