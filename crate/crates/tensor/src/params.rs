//! Named parameter storage shared across forward passes.
//!
//! Values are `Rc`-shared into graphs as leaves, so leasing the whole store
//! into a fresh graph is cheap. Updates go through `value_mut`, which copies
//! only if a stale graph still holds the previous version.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::graph::{Graph, TensorId, Value};

#[derive(Clone)]
pub struct Param {
    pub value: Value,
    /// Trainable parameters receive optimizer updates; buffers (e.g. batch
    /// norm running statistics) are checkpointed but never stepped.
    pub trainable: bool,
}

#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.entries.push(Param {
            value: Rc::new(value),
            trainable,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> &Param {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter: {name}"));
        &self.entries[i]
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self.get(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter: {name}"));
        Rc::make_mut(&mut self.entries[i].value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.get(name).trainable
    }

    /// Total scalar count over names matching `prefix`.
    pub fn count_params(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.entries)
            .filter(|(n, p)| n.starts_with(prefix) && p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Leases every parameter into `graph` as a leaf and returns the lease.
    pub fn lease(&self, graph: &mut Graph, trainable_grads: bool) -> Lease {
        let mut ids = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let rg = trainable_grads && p.trainable;
            ids.push(graph.leaf_shared(Rc::clone(&p.value), rg));
        }
        Lease {
            names: self.names.clone(),
            ids,
        }
    }

    /// Flat iteration for serialization: (name, trainable, shape, data).
    pub fn iter(&self) -> impl Iterator<Item = (&str, bool, &ArrayD<f64>)> {
        self.names
            .iter()
            .zip(&self.entries)
            .map(|(n, p)| (n.as_str(), p.trainable, &*p.value))
    }

    /// Replaces a value wholesale (used by checkpoint restore); shape must match.
    pub fn restore(&mut self, name: &str, value: ArrayD<f64>) {
        let i = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter: {name}"));
        assert_eq!(
            self.entries[i].value.shape(),
            value.shape(),
            "restore shape mismatch for {name}"
        );
        self.entries[i].value = Rc::new(value);
    }
}

/// Mapping from parameter names to their leaf ids inside one graph.
pub struct Lease {
    names: Vec<String>,
    ids: Vec<TensorId>,
}

impl Lease {
    pub fn id(&self, name: &str) -> TensorId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter not leased: {name}"));
        self.ids[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.names.iter().map(|s| s.as_str()).zip(self.ids.iter().copied())
    }
}

/// Convenience constructor for zero-filled arrays.
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Convenience constructor for constant-filled arrays.
pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}
