//! Named trainable parameters.

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Depth of the owning block; used by layer-wise learning-rate decay.
    pub depth: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Insertion-ordered table of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Weight decay defaults to matrices only.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, depth: usize) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return contract(format!("duplicate parameter '{name}'"));
        }
        let decay = tensor.rank() >= 2;
        let (idx, _) = self.entries.insert_full(name, ParamEntry { tensor, depth, decay });
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Remove and return the last `n` entries, oldest first.
    pub(crate) fn split_tail(&mut self, n: usize) -> Vec<(String, ParamEntry)> {
        let keep = self.entries.len().saturating_sub(n);
        self.entries.split_off(keep).into_iter().collect()
    }

    /// Re-append entries taken by [`split_tail`](Self::split_tail).
    pub(crate) fn append(&mut self, tail: Vec<(String, ParamEntry)>) -> Result<()> {
        for (name, entry) in tail {
            if self.entries.contains_key(&name) {
                return contract(format!("duplicate parameter '{name}'"));
            }
            self.entries.insert(name, entry);
        }
        Ok(())
    }

    pub fn max_depth(&self) -> usize {
        self.entries.values().map(|e| e.depth).max().unwrap_or(0)
    }

    /// Place every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.values().map(|e| g.param(e.tensor.clone())).collect(),
        }
    }
}

/// Parameters placed on one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, in store order. Parameters that did not take
    /// part in the loss get zeros.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.entries.values())
            .map(|(v, e)| grads.get_or_zeros(*v, e.tensor.len()))
            .collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]), 0).unwrap();
        assert!(s.add("w", Tensor::zeros(&[1]), 0).is_err());
        assert!(s.get(s.id("w").unwrap()).decay);
    }
}
