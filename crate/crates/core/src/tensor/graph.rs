//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows the parameter set immutably, records every operation
//! in evaluation order and, on [`Graph::backward`], walks the tape in reverse,
//! accumulating parameter gradients into a caller-supplied [`Gradients`].
//! Nodes are vectors (or `[1]` scalars); parameter nodes may be matrices.

use super::ops::{self, Activation};
use super::{Gradients, ParamId, ParameterSet, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Row {
        param: ParamId,
        row: usize,
    },
    MatVec {
        w: NodeId,
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Vec<T>),
    Act(NodeId, Activation),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
    },
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Softmax(NodeId),
    WeightedSum {
        weights: NodeId,
        states: Vec<NodeId>,
    },
    /// Negative log-likelihood of `target` under softmax(logits); `aux` keeps the probabilities.
    Nll {
        logits: NodeId,
        target: usize,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the parameter set.
    value: Option<Tensor<T>>,
    aux: Option<Tensor<T>>,
}

pub struct Graph<'p, T> {
    params: &'p ParameterSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    /// Probabilities computed alongside an [`Graph::nll`] node.
    pub fn nll_probs(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].aux.as_ref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        value.debug_assert_finite();
        self.nodes.push(Node {
            op,
            value: Some(value),
            aux: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// The node standing for parameter `id`; created once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            aux: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Row `row` of a matrix parameter (embedding lookup).
    pub fn row(&mut self, param: ParamId, row: usize) -> Result<NodeId> {
        let table = self.params.value(param);
        if !table.is_matrix() || row >= table.rows() {
            return Err(Error::shape(
                "row",
                format!("row {row} out of range for {:?}", table.shape()),
            ));
        }
        let v = Tensor::from_vec(table.row(row).to_vec());
        Ok(self.push(Op::Row { param, row }, v))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let v = ops::matvec(self.value(w), self.value(x))?;
        Ok(self.push(Op::MatVec { w, x }, v))
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<T>) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for {:?}", c.len(), self.value(a).shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::MulConst(a, c), v))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let v = ops::activation(kind, self.value(a));
        self.push(Op::Act(a, kind), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_vector() {
                return Err(Error::shape("concat", format!("non-vector part {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        if data.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::from_vec(data)))
    }

    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(src);
        if len == 0 || start + len > v.len() {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, v.shape()),
            ));
        }
        let out = Tensor::from_vec(v.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice { src, start }, out))
    }

    /// Inner product as a `[1]` scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let d = ops::dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(d)))
    }

    /// Gathers `[1]` scalars into one vector.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let v = self.value(s);
            if v.len() != 1 {
                return Err(Error::shape("stack", format!("non-scalar {:?}", v.shape())));
            }
            data.push(v.item());
        }
        if data.is_empty() {
            return Err(Error::EmptyAttention);
        }
        Ok(self.push(Op::Stack(scalars.to_vec()), Tensor::from_vec(data)))
    }

    pub fn softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let v = ops::softmax_stable(self.value(x), mask)?;
        Ok(self.push(Op::Softmax(x), v))
    }

    /// `Σ_i weights[i] · states[i]`.
    pub fn weighted_sum(&mut self, weights: NodeId, states: &[NodeId]) -> Result<NodeId> {
        let w = self.value(weights);
        if w.len() != states.len() || states.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} states", w.len(), states.len()),
            ));
        }
        let width = self.value(states[0]).len();
        let mut out = vec![T::zero(); width];
        for (&a, &s) in w.data().iter().zip(states) {
            let sv = self.value(s);
            if sv.len() != width {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("state width {} vs {width}", sv.len()),
                ));
            }
            for (o, &x) in out.iter_mut().zip(sv.data()) {
                *o += a * x;
            }
        }
        Ok(self.push(
            Op::WeightedSum {
                weights,
                states: states.to_vec(),
            },
            Tensor::from_vec(out),
        ))
    }

    /// `-log softmax(logits)[target]` as a `[1]` scalar.
    pub fn nll(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let l = self.value(logits);
        if target >= l.len() {
            return Err(Error::shape(
                "nll",
                format!("target {target} out of range for {:?}", l.shape()),
            ));
        }
        let probs = ops::softmax_stable(l, None)?;
        let max = l.data().iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = max + l.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = log_z - l.data()[target];
        let id = self.push(Op::Nll { logits, target }, Tensor::scalar(loss));
        self.nodes[id.0].aux = Some(probs);
        Ok(id)
    }

    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("sum", "no terms"));
        };
        let mut v = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("sum", first, p)?;
            v.add_assign(self.value(p));
        }
        Ok(self.push(Op::Sum(parts.to_vec()), v))
    }

    /// Back-propagates from scalar `root` (seed 1) and adds parameter
    /// gradients into `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut Gradients<T>) -> Result<()> {
        self.backward_seeded(root, T::one(), grads)
    }

    pub fn backward_seeded(&self, root: NodeId, seed: T, grads: &mut Gradients<T>) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(seed));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => grads.get_mut(*p).add_assign(&g),
                Op::Row { param, row } => {
                    let target = grads.get_mut(*param).row_mut(*row);
                    for (t, &d) in target.iter_mut().zip(g.data()) {
                        *t += d;
                    }
                }
                Op::MatVec { w, x } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let cols = wv.cols();
                    let gd = g.data();
                    // dW = g xᵀ
                    let mut dw = vec![T::zero(); wv.len()];
                    for (r, &gr) in gd.iter().enumerate() {
                        if gr == T::zero() {
                            continue;
                        }
                        let row = &mut dw[r * cols..(r + 1) * cols];
                        for (d, &xc) in row.iter_mut().zip(xv.data()) {
                            *d = gr * xc;
                        }
                    }
                    // dx = Wᵀ g
                    let mut dx = vec![T::zero(); cols];
                    for (r, &gr) in gd.iter().enumerate() {
                        if gr == T::zero() {
                            continue;
                        }
                        for (d, &wc) in dx.iter_mut().zip(wv.row(r)) {
                            *d += wc * gr;
                        }
                    }
                    accumulate(&mut adj, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(&mut adj, *x, Tensor::from_vec(dx));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::MulConst(a, c) => {
                    let mut d = g;
                    for (v, &m) in d.data_mut().iter_mut().zip(c) {
                        *v *= m;
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Act(a, kind) => {
                    let y = self.value(NodeId(i));
                    let d = zip_map(&g, y, |gv, yv| gv * kind.derivative_from_output(yv));
                    accumulate(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = Tensor::from_vec(g.data()[offset..offset + n].to_vec());
                        accumulate(&mut adj, p, piece);
                        offset += n;
                    }
                }
                Op::Slice { src, start } => {
                    let mut d = Tensor::zeros_like(self.value(*src));
                    d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut adj, *src, d);
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    let da = self.value(*b).map(|v| v * s);
                    let db = self.value(*a).map(|v| v * s);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Stack(parts) => {
                    for (&p, &gv) in parts.iter().zip(g.data()) {
                        accumulate(&mut adj, p, Tensor::scalar(gv));
                    }
                }
                Op::Softmax(x) => {
                    let y = self.value(NodeId(i));
                    let inner = ops::dot(g.data(), y.data());
                    let d = zip_map(&g, y, |gv, yv| yv * (gv - inner));
                    accumulate(&mut adj, *x, d);
                }
                Op::WeightedSum { weights, states } => {
                    let w = self.value(*weights);
                    let mut dw = Vec::with_capacity(states.len());
                    for (&a, &s) in w.data().iter().zip(states) {
                        dw.push(ops::dot(g.data(), self.value(s).data()));
                        accumulate(&mut adj, s, g.map(|v| v * a));
                    }
                    accumulate(&mut adj, *weights, Tensor::from_vec(dw));
                }
                Op::Nll { logits, target } => {
                    let s = g.item();
                    let mut d = self.nodes[i].aux.as_ref().expect("nll keeps probabilities").clone();
                    d.data_mut()[*target] -= T::one();
                    d.scale(s);
                    accumulate(&mut adj, *logits, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut adj, p, g.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(name: &str, t: Tensor<f64>) -> (ParameterSet<f64>, ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.add(name, t).unwrap();
        (ps, id)
    }

    #[test]
    fn square_gradient() {
        let (ps, id) = single("theta", Tensor::scalar(3.0));
        let mut g = Graph::new(&ps);
        let t = g.param(id);
        let sq = g.mul(t, t).unwrap();
        assert_eq!(g.value(sq).item(), 9.0);
        let mut grads = Gradients::zeros_for(&ps);
        g.backward(sq, &mut grads).unwrap();
        assert_eq!(grads.get(id).item(), 6.0);
    }

    #[test]
    fn affine_gradients() {
        let mut ps = ParameterSet::new();
        let w = ps
            .add("w", Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let b = ps.add("b", Tensor::from_vec(vec![0.5, -0.5])).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_vec(vec![1.0, 0.0, -1.0]));
        let (wn, bn) = (g.param(w), g.param(b));
        let y = g.affine(wn, x, bn).unwrap();
        assert_eq!(g.value(y).data(), &[-1.5, -2.5]);
        // loss = sum(y) => dW rows = x, db = 1
        let ones = g.input(Tensor::from_vec(vec![1.0, 1.0]));
        let loss = g.dot(y, ones).unwrap();
        let mut grads = Gradients::zeros_for(&ps);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w).data(), &[1., 0., -1., 1., 0., -1.]);
        assert_eq!(grads.get(b).data(), &[1., 1.]);
    }

    #[test]
    fn embedding_row_gradient_is_sparse() {
        let (ps, id) = single("emb", Tensor::from_f64(vec![3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let mut g = Graph::new(&ps);
        let r = g.row(id, 1).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4.]);
        let loss = g.dot(r, r).unwrap();
        let mut grads = Gradients::zeros_for(&ps);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(id).data(), &[0., 0., 6., 8., 0., 0.]);
        assert!(g.row(id, 3).is_err());
    }

    #[test]
    fn nll_matches_log_softmax() {
        let (ps, id) = single("l", Tensor::from_vec(vec![0.0, 3f64.ln()]));
        let mut g = Graph::new(&ps);
        let l = g.param(id);
        let n = g.nll(l, 1).unwrap();
        assert_abs_diff_eq!(g.value(n).item(), -(0.75f64.ln()), epsilon = 1e-12);
        let p = g.nll_probs(n).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.25, epsilon = 1e-12);
        let mut grads = Gradients::zeros_for(&ps);
        g.backward(n, &mut grads).unwrap();
        assert_abs_diff_eq!(grads.get(id).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(grads.get(id).data()[1], -0.25, epsilon = 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let (ps, id) = single("v", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new(&ps);
        let v = g.param(id);
        let mut grads = Gradients::zeros_for(&ps);
        assert!(g.backward(v, &mut grads).is_err());
    }
}
