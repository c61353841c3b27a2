//! Parameterised building blocks. Each layer knows its parameter names and
//! shapes; `init` registers them in a store and `forward` pulls them into a
//! graph.

use super::graph::{Graph, Var};
use super::params::{kaiming_uniform, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad: kernel / 2 }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        let fan_in = self.cin * self.kernel * self.kernel;
        let w = kaiming_uniform(&[self.cout, self.cin, self.kernel, self.kernel], fan_in, rng);
        store.insert(format!("{}/w", self.name), w)?;
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.cout]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}/w", self.name))?;
        let b = g.param(p, &format!("{}/b", self.name))?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { name: name.into(), din, dout }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.init_with_bias(store, rng, Tensor::zeros(&[self.dout]))
    }

    pub fn init_with_bias<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut Rng, bias: Tensor<T>) -> Result<()> {
        store.insert(format!("{}/w", self.name), kaiming_uniform(&[self.dout, self.din], self.din, rng))?;
        store.insert(format!("{}/b", self.name), bias)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}/w", self.name))?;
        let b = g.param(p, &format!("{}/b", self.name))?;
        g.linear(x, w, Some(b))
    }
}

/// Normalization with a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Group(usize),
    Layer,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn group(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        Self { name: name.into(), channels, kind: NormKind::Group(groups) }
    }

    pub fn layer(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, kind: NormKind::Layer }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{}/gamma", self.name), Tensor::ones(&[self.channels]))?;
        store.insert(format!("{}/beta", self.name), Tensor::zeros(&[self.channels]))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(p, &format!("{}/gamma", self.name))?;
        let beta = g.param(p, &format!("{}/beta", self.name))?;
        match self.kind {
            NormKind::Group(groups) => g.group_norm(x, groups, Some(gamma), Some(beta), NORM_EPS),
            NormKind::Layer => g.layer_norm(x, gamma, beta, NORM_EPS),
        }
    }
}

/// Largest group count not exceeding `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}
