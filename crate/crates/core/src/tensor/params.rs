// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, Var};

/// Named parameters, iterated in lexicographic path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        BoundParams { vars }
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &Tape) -> BoundParams {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        BoundParams { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects the gradient of every bound parameter; missing ones are zero.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
