use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Named trainable leaves in a fixed insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Registers `data` as a trainable leaf. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Tensor::param(data, shape)?);
        Ok(())
    }

    /// Registers an existing tensor as-is, keeping its graph connection.
    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing parameter with a fresh leaf.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let slot = self.entries.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        *slot = Tensor::param(data, slot.shape())?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Gradients in store order, zero-filled where none was accumulated.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.entries.values().map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])).collect()
    }

    pub fn zero_grads(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Same names and values in another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast::<U>().to_param())).collect() }
    }
}
