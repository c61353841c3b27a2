//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value and a closure mapping the output gradient to input
//! gradients. [`Graph::backward`] walks the nodes in reverse insertion order,
//! which is a valid topological order because nodes only reference earlier
//! nodes.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Read access to forward values while running a backward closure.
pub struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Whether a gradient for `v` is wanted at all.
    pub fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Loads a named parameter. Repeated requests for the same name return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The backward closure is dropped when no input
    /// needs a gradient.
    pub fn push<F>(&mut self, value: Tensor<T>, inputs: Vec<Var>, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, inputs, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the single-element `loss` with respect to every leaf
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a single-element loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params: self.param_order.clone() });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let ctx = BackwardCtx { nodes: &self.nodes };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let input_grads = bw(&ctx, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape());
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads, params: self.param_order.clone() })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by name. Parameters that were loaded but did
    /// not influence the loss get zero gradients.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("loaded param").shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
