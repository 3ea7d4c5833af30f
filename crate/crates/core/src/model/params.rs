use std::collections::BTreeMap;

use crate::tensor::{Tape, Tensor, Var};

/// Named learnable tensors. Paths are dotted, e.g. `temporal.block0.time.weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters registered on a tape for one forward pass.
pub type ParamVars<'t> = BTreeMap<String, Var<'t>>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.tensors.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar learnables.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape`, as leaves when `trainable`.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        self.tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }
}
