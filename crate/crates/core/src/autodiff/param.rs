use std::collections::HashMap;

use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<R> {
    name: String,
    value: Tensor<R>,
    grad: Tensor<R>,
}

impl<R: Real> Parameter<R> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<R> {
        &self.grad
    }
}

/// Owns every parameter of a model. Names are unique and shapes are fixed
/// at registration.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].grad
    }

    /// Replaces a parameter value; the shape must match the registered one.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut [R] {
        self.params[id.0].value.data_mut()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[R]) {
        for (g, &d) in self.params[id.0].grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Mutable access to (value, grad) pairs, used by optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [R], &[R]) {
        let p = &mut self.params[id.0];
        (p.value.data_mut(), p.grad.data())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> R {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<R>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: R) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::zeros([2])).unwrap();
        assert_eq!(
            ps.add("w", Tensor::zeros([3])).unwrap_err(),
            TensorError::DuplicateParameter("w".into())
        );
    }

    #[test]
    fn shape_is_immutable() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::zeros([2])).unwrap();
        assert!(ps.set_value(id, Tensor::zeros([3])).is_err());
        assert!(ps.set_value(id, Tensor::vector(vec![1.0, 2.0])).is_ok());
    }
}
