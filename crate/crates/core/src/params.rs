//! Named parameter storage with per-entry freezing.
//!
//! Names are hierarchical, dot separated: `backbone.block3.body.0.weight`,
//! `branch1.conv0.weight`. Batch-norm running statistics live next to the
//! parameters as non-trainable buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Which part of an assembled model a freeze applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Backbone,
    Branch(usize),
}

impl Scope {
    pub fn prefix(&self) -> String {
        match self {
            Scope::Backbone => BACKBONE_PREFIX.to_string(),
            Scope::Branch(n) => format!("branch{n}."),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T: Scalar = f32> {
    params: BTreeMap<String, ParamEntry<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        self.params.insert(name, ParamEntry { tensor, frozen: false });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name, tensor);
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over trainable-kind entries (buffers excluded).
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|e| e.tensor.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.tensor.len())
            .sum()
    }

    /// Marks every entry in `scope` frozen and drops its gradient. Idempotent.
    pub fn freeze(&mut self, scope: Scope) {
        let prefix = scope.prefix();
        for (name, entry) in self.params.iter_mut() {
            if name.starts_with(&prefix) {
                entry.frozen = true;
                entry.tensor.grad = None;
            }
        }
    }

    pub fn unfreeze(&mut self, scope: Scope) {
        let prefix = scope.prefix();
        for (name, entry) in self.params.iter_mut() {
            if name.starts_with(&prefix) {
                entry.frozen = false;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for entry in self.params.values_mut() {
            entry.tensor.grad = None;
        }
    }

    /// Adds `grad` into the named entry's gradient. Frozen entries are skipped.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<bool> {
        let entry = self.entry_mut(name)?;
        if entry.frozen {
            return Ok(false);
        }
        let len = entry.tensor.len();
        if grad.len() != len {
            return Err(Error::shape(
                format!("gradient of `{name}`"),
                format!("{len} values"),
                &[grad.len()],
            ));
        }
        match &mut entry.tensor.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += *b),
            None => entry.tensor.grad = Some(grad.to_vec()),
        }
        Ok(true)
    }

    /// Moves all entries of `other` into `self`, rejecting name collisions.
    pub fn merge(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (name, entry) in other.params {
            if self.contains(&name) {
                return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
            }
            self.params.insert(name, entry);
        }
        for (name, buf) in other.buffers {
            self.insert_buffer(name, buf)?;
        }
        Ok(())
    }

    /// Entries (parameters and buffers) whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore<T> {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }

    /// True when every value (parameters and buffers) matches `other` bit for bit.
    pub fn bit_identical(&self, other: &Self) -> bool {
        fn same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
        }
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb && a.frozen == b.frozen && same(&a.tensor, &b.tensor)
            })
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|((ka, a), (kb, b))| ka == kb && same(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("backbone.w", Tensor::full(&[2], 1.0)).unwrap();
        s.insert("branch0.w", Tensor::full(&[3], 1.0)).unwrap();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = store();
        assert!(s.insert("backbone.w", Tensor::zeros(&[1])).is_err());
        assert!(s.insert_buffer("branch0.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn freeze_touches_only_scope_and_is_idempotent() {
        let mut s = store();
        s.freeze(Scope::Backbone);
        let once = s.clone();
        s.freeze(Scope::Backbone);
        assert_eq!(s, once);
        assert!(s.entry("backbone.w").unwrap().frozen);
        assert!(!s.entry("branch0.w").unwrap().frozen);
    }

    #[test]
    fn frozen_entries_never_receive_grads() {
        let mut s = store();
        s.freeze(Scope::Backbone);
        assert!(!s.accumulate_grad("backbone.w", &[1.0, 1.0]).unwrap());
        assert!(s.accumulate_grad("branch0.w", &[1.0, 2.0, 3.0]).unwrap());
        assert!(s.tensor("backbone.w").unwrap().grad.is_none());
        assert_eq!(s.tensor("branch0.w").unwrap().grad.as_deref(), Some(&[1.0, 2.0, 3.0][..]));
    }
}
