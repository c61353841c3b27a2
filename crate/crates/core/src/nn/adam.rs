use std::collections::BTreeMap;

use super::params::{AdamSlot, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update, no weight decay. `grads` must be keyed
/// exactly like the parameters of `store`.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: AdamConfig,
) -> Result<()> {
    if let Some(extra) = grads.keys().find(|k| !store.contains(k)) {
        return Err(Error::UnknownParam(extra.clone()));
    }
    if let Some(missing) = store.names().find(|k| !grads.contains_key(*k)) {
        return Err(Error::InvalidArgument(format!("missing gradient for `{missing}`")));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (name, g) in grads {
        let p = store.get(name).expect("checked above");
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for `{name}`: {:?} vs {:?}", g.shape(), p.shape())));
        }
        let slot = store.adam.entry(name.clone()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let len = g.numel();
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        let p = store.params.get_mut(name).expect("checked above").data_mut();
        for i in 0..len {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
