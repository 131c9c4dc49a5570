use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Named parameters with a frozen subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

/// Tape handles for one forward pass, keyed by parameter name.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors, frozen: BTreeSet::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors.iter().filter(|(k, _)| !self.frozen.contains(*k)).map(|(_, t)| t.numel()).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(Error::Config(format!("cannot freeze unknown parameter {name}")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Places every parameter on the tape. With `train`, unfrozen
    /// parameters require gradients.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if train && !self.frozen.contains(k) { tape.leaf(t, true) } else { tape.constant(t) };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Adds tape gradients into the `grad` buffers of unfrozen parameters.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &Bindings) -> Result<()> {
        for (name, var) in bindings.iter() {
            if self.frozen.contains(name) {
                continue;
            }
            if let Some(g) = grads.get(var) {
                self.tensors.get_mut(name).expect("bound from this store").accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
