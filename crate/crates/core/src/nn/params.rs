use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// First/second moment estimates and update count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Named parameters plus their optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub(crate) params: BTreeMap<String, Tensor<T>>,
    pub(crate) adam: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), adam: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn adam_slot(&self, name: &str) -> Option<&AdamSlot<T>> {
        self.adam.get(name)
    }

    pub fn set_adam_slot(&mut self, name: &str, slot: AdamSlot<T>) -> Result<()> {
        let p = self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.m.shape() != p.shape() || slot.v.shape() != p.shape() {
            return Err(Error::Shape(format!("optimizer state for `{name}` has the wrong shape")));
        }
        self.adam.insert(name.to_string(), slot);
        Ok(())
    }

    /// The sub-store of parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        let keep = |k: &String| k.starts_with(prefix);
        Self {
            params: self.params.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            adam: self.adam.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: Self) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        self.adam.extend(other.adam);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            adam: self
                .adam
                .iter()
                .map(|(k, s)| (k.clone(), AdamSlot { m: s.m.cast(), v: s.v.cast(), step: s.step }))
                .collect(),
        }
    }

    /// Drops optimizer state, e.g. when a new training stage starts.
    pub fn reset_optimizer(&mut self) {
        self.adam.clear();
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Kaiming-uniform weights with `a = sqrt(5)`: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}
