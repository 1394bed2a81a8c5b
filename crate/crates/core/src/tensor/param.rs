use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient buffer and ADAM moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros_like(&value);
        Parameter {
            name: name.into(),
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replaces every gradient buffer with the accumulated `grads`.
    pub fn set_grads(&mut self, grads: Gradients<T>) {
        assert_eq!(grads.0.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads.0) {
            p.grad = g;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt()
    }

    /// Values only; moments and gradients are reset.
    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient accumulator aligned with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub(crate) Vec<Tensor<T>>);

impl<T: Real> Gradients<T> {
    pub fn zeros_for(params: &ParameterSet<T>) -> Self {
        Gradients(params.iter().map(|p| Tensor::zeros_like(&p.value)).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.0.iter()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }
}

/// Normalizes gradients by the mini-batch size, then rescales them so the
/// global L2 norm does not exceed `threshold`. Returns the clipping factor
/// applied after normalization (1 when no clipping happened).
pub fn clip_global_norm<T: Real>(params: &mut ParameterSet<T>, threshold: f64, batch_size: usize) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let inv_batch = T::lit(1.0 / batch_size.max(1) as f64);
    for p in params.iter_mut() {
        p.grad.scale(inv_batch);
    }
    let norm = params.grad_norm();
    if norm <= threshold || norm == 0.0 {
        return 1.0;
    }
    let scale = threshold / norm;
    let s = T::lit(scale);
    for p in params.iter_mut() {
        p.grad.scale(s);
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set_with_grad(grad: &[f64]) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        let id = ps.add("w", Tensor::zeros(&[grad.len()])).expect("fresh name");
        ps.get_mut(id).grad = Tensor::from_vec(grad.to_vec());
        ps
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::<f32>::new();
        ps.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(ps.add("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn clip_scales_down_large_norm() {
        // batch 2 halves [12, 16] (norm 20) to [6, 8] (norm 10)
        let mut ps = set_with_grad(&[12.0, 16.0]);
        let s = clip_global_norm(&mut ps, 5.0, 2);
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ps.grad_norm(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_leaves_small_norm() {
        let mut ps = set_with_grad(&[0.0, 3.0]);
        assert_eq!(clip_global_norm(&mut ps, 5.0, 1), 1.0);
        assert_eq!(ps.params[0].grad.data(), &[0.0, 3.0]);
    }

    #[test]
    fn clip_zero_grads() {
        let mut ps = set_with_grad(&[0.0, 0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut ps, 5.0, 128), 1.0);
        assert_eq!(ps.grad_norm(), 0.0);
    }
}
