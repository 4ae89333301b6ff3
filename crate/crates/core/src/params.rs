//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::CheckpointError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is the name order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Puts every parameter on the tape; `trainable(name)` decides which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name))))
            .collect();
        Bindings { vars }
    }

    /// Checks that `other` carries the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<(), CheckpointError> {
        for (name, t) in &self.tensors {
            let o = other.require(name)?;
            if o.shape() != t.shape() {
                return Err(CheckpointError::ParamShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Byte image of all parameters in name order; equal images imply
    /// bit-identical parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            out.extend_from_slice(name.as_bytes());
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    /// Panics on unknown names: parameter names are fixed by model code.
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }

    /// Gradients for the bound names that received one.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}
