//! Named parameter storage.
//!
//! A [`ParamSet`] keeps every tensor a model owns, in a stable insertion
//! order, under dotted path names like `enc1.conv1.w`. Learnable entries
//! take gradient updates; non-learnable entries (batch norm running
//! statistics) are state the forward pass reads and rewrites.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub learnable: bool,
}

pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> ParamSet<T> {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, learnable: bool) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            learnable,
        });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entries[self.index_of(name)?].tensor)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let idx = self.index_of(name)?;
        self.set_at(idx, tensor)
    }

    pub fn at(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn set_at(&mut self, idx: usize, tensor: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[idx];
        if tensor.dims() != entry.tensor.dims() {
            return Err(Error::Shape(format!(
                "parameter {:?} has dims {}, replacement has {}",
                entry.name,
                entry.tensor.dims(),
                tensor.dims()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    /// Indices of learnable entries, in insertion order.
    pub fn learnable_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.learnable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total element count across learnable entries.
    pub fn learnable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.learnable)
            .map(|e| e.tensor.len())
            .sum()
    }
}
