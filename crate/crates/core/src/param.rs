use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor. Trainable parameters own a gradient buffer of the same
/// shape; frozen parameters have none and can never accumulate one.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, delta: &Tensor) {
        if let Some(g) = &mut self.grad {
            g.add_assign(delta);
        }
    }
}

/// Ordered collection of parameters. Order is insertion order and defines the
/// canonical order for hashing and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = trainable.then(|| Tensor::zeros(value.shape()));
        self.params.push(Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params[id.0].value()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Number of scalars held by trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when no trainable value is NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .all(|p| p.value.data().iter().all(|v| v.is_finite()))
    }

    /// Number of allocated gradient buffers.
    pub fn grad_buffers(&self) -> usize {
        self.params.iter().filter(|p| p.grad.is_some()).count()
    }

    /// FNV-1a digest over names, shapes and value bytes in canonical order.
    pub fn byte_hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        for p in &self.params {
            self::hash_parameter(&mut h, p);
        }
        h.finish()
    }
}

pub(crate) fn hash_parameter(h: &mut FnvHasher, p: &Parameter) {
    h.write(p.name.as_bytes());
    for &d in p.value.shape() {
        h.write(&(d as u64).to_le_bytes());
    }
    for v in p.value.data() {
        h.write(&v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_have_no_grad_buffer() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::full(&[2, 2], 1.0), true);
        let b = s.add("b", Tensor::full(&[3], 1.0), false);
        assert_eq!(s.grad_buffers(), 1);
        assert_eq!(s.trainable_scalars(), 4);
        s.get_mut(b).accumulate(&Tensor::full(&[3], 1.0));
        assert!(s.get(b).grad().is_none());
        s.get_mut(a).accumulate(&Tensor::full(&[2, 2], 2.0));
        s.zero_grad();
        assert!(s.get(a).grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hash_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::full(&[2], 1.0), true);
        let h0 = s.byte_hash();
        assert_eq!(h0, s.clone().byte_hash());
        s.get_mut(a).value_mut().data_mut()[1] = 1.5;
        assert_ne!(h0, s.byte_hash());
    }
}
