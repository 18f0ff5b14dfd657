//! Named parameter storage.
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]; the store owns the
//! actual tensors. The optimizer replaces tensors wholesale (tensors are
//! immutable), and checkpoints iterate the store in insertion order, which is
//! deterministic for a fixed architecture.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push((name, tensor.requires_grad()));
        ParamId(idx)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    /// Cheap handle clone for use in a forward pass.
    pub fn tensor(&self, id: ParamId) -> Tensor {
        self.entries[id.0].1.clone()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Replace the data of parameter `idx` with a fresh leaf tensor.
    pub fn replace(&mut self, idx: usize, data: Vec<f32>) {
        let shape = self.entries[idx].1.shape().to_vec();
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries[idx].1 = Tensor::from_vec(&shape, data).unwrap().requires_grad();
    }

    /// Remove accumulated gradients, returning one slot per parameter.
    pub fn take_grads(&self) -> Vec<Option<Vec<f32>>> {
        self.entries.iter().map(|(_, t)| t.take_grad()).collect()
    }

    /// As `take_grads`, but parameters untouched by the loss get explicit
    /// zero gradients (their true derivative).
    pub fn take_grads_zero_filled(&self) -> Vec<Option<Vec<f32>>> {
        self.entries
            .iter()
            .map(|(_, t)| Some(t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect()
    }
}
