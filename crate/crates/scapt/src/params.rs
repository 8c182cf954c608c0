//! Named parameter store shared by the encoder, decoder, and loss heads.
//!
//! Parameters live outside any tape. Each forward pass binds every parameter
//! onto a fresh tape exactly once; gradients are read back after `backward`.

use indexmap::IndexMap;

use crate::error::{Result, ScaptError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| ScaptError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| ScaptError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let mut vars = IndexMap::new();
        for (name, value) in &self.entries {
            vars.insert(name.clone(), tape.leaf(value.clone(), true));
        }
        Binding { vars }
    }
}

/// Per-tape view of a `ParamSet`: parameter name → tape leaf.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ScaptError::Contract(format!("parameter `{name}` not bound")))
    }

    /// Gradients for every bound parameter after a backward pass.
    /// Parameters the loss never touched come back as zeros.
    pub fn grads(&self, tape: &Tape) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), tape.grad(v)))
            .collect()
    }
}
