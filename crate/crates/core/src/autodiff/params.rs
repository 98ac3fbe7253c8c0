use std::collections::BTreeMap;
use std::sync::Arc;

use super::array::DenseArray;
use super::tape::{Gradients, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Arc<DenseArray>,
    pub learnable: bool,
}

/// Named parameter arrays, each either learnable or frozen.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// derived quantity (checkpoints, hashes, gradient norms) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray, learnable: bool) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value: Arc::new(value),
                learnable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name).map(|e| e.value.as_ref())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name).map(|e| Arc::make_mut(&mut e.value))
    }

    pub fn set_learnable(&mut self, name: &str, learnable: bool) {
        if let Some(e) = self.entries.get_mut(name) {
            e.learnable = learnable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn learnable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.learnable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// Registers learnable entries as tape parameters and frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, entry) in &self.entries {
            let v = if entry.learnable {
                tape.param(name, entry.value.clone())?
            } else {
                tape.constant(entry.value.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    pub fn global_grad_norm(grads: &Gradients) -> f64 {
        grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
