use std::collections::HashMap;

use crate::numerics::{Tape, Tensor, Var};

/// Named model parameters in a stable creation order. The order drives
/// checkpoint layout, gradient collection, and optimizer state, so it must
/// be deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Keep only parameters for which `keep` returns true, preserving order.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            if keep(n) {
                out.insert(n, t.clone());
            }
        }
        out
    }

    /// Bind every parameter onto a tape as leaves.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        let mut vars = HashMap::new();
        for (n, t) in &self.entries {
            vars.insert(n.clone(), tape.leaf(t.clone(), trainable));
        }
        BoundParams { vars }
    }
}

/// Parameters as graph leaves for one forward/backward pass.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Bind caller-supplied leaves by position against an ordered name list;
    /// the finite-difference verifier uses this to treat every parameter as
    /// a free input of the objective.
    pub fn from_ordered(names: &[&str], vars: &[Var]) -> BoundParams {
        assert_eq!(names.len(), vars.len(), "names/vars length mismatch");
        BoundParams {
            vars: names
                .iter()
                .map(|n| n.to_string())
                .zip(vars.iter().cloned())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Collect gradients in the store's order; zero tensors for parameters
    /// the loss did not touch.
    pub fn grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(n, t)| {
                self.vars[n]
                    .grad()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
