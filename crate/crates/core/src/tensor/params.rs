use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    kind: ParamKind,
    tensor: Tensor<T>,
}

/// Named parameter set of one model. Iteration order is by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Adds a new entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name:?}")));
        }
        self.entries.insert(name, Entry { kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces the values of an existing entry; the shape may not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                detail: format!("{name}: {:?} vs {:?}", e.tensor.shape(), tensor.shape()),
            });
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e.kind, &e.tensor))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Sets every value (trainable and buffer) to `v`.
    pub fn fill(&mut self, v: T) {
        for e in self.entries.values_mut() {
            e.tensor.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| (n.clone(), Entry { kind: e.kind, tensor: e.tensor.cast() }))
                .collect(),
        }
    }
}
