//! Group and layer normalization.

use super::graph::{Graph, Var};
use super::ops::ncs;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Standardizes consecutive chunks of `len` elements; returns the
/// standardized values and per-chunk inverse standard deviations.
fn standardize<T: Scalar>(data: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_len = T::one() / T::lit(len as f64);
    let mut xhat = vec![T::zero(); data.len()];
    let mut inv_std = Vec::with_capacity(data.len() / len);
    for (src, dst) in data.chunks(len).zip(xhat.chunks_mut(len)) {
        let mean = src.iter().copied().sum::<T>() * inv_len;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
        let is = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Gradient through standardization given the gradient w.r.t. the
/// standardized values.
fn standardize_backward<T: Scalar>(gxhat: &mut [T], xhat: &[T], inv_std: &[T], len: usize) {
    let inv_len = T::one() / T::lit(len as f64);
    for ((g, xh), &is) in gxhat.chunks_mut(len).zip(xhat.chunks(len)).zip(inv_std) {
        let mg = g.iter().copied().sum::<T>() * inv_len;
        let mgx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_len;
        for (gv, &xv) in g.iter_mut().zip(xh) {
            *gv = is * (*gv - mg - xv * mgx);
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Group normalization over `[N, C, ...]` (rank 2 inputs are treated as
    /// `[N, C, 1, 1]`), with optional per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, c, s) = ncs(&xs);
        if xs.len() < 2 || groups == 0 || c % groups != 0 {
            return Err(shape_err!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(shape_err!("group_norm: affine {:?}, expected [{c}]", self.shape(p)));
            }
        }
        let glen = (c / groups) * s;
        let (xhat, inv_std) = standardize(self.value(x).data(), glen, T::lit(eps));
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gd = gamma.map(|v| self.value(v).data().to_vec());
            let bd = beta.map(|v| self.value(v).data().to_vec());
            for (j, chunk) in out.chunks_mut(s).enumerate() {
                let ch = j % c;
                let a = gd.as_ref().map_or(T::one(), |g| g[ch]);
                let b = bd.as_ref().map_or(T::zero(), |g| g[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * a + b);
            }
        }
        let out = Tensor::new(&xs, out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(out, inputs, move |ctx, g| {
            let gd = g.data();
            let gamma_v = gamma.map(|v| ctx.value(v).data());
            let gx = ctx.needs(x).then(|| {
                let mut d = gd.to_vec();
                if let Some(gm) = gamma_v {
                    for (j, chunk) in d.chunks_mut(s).enumerate() {
                        let a = gm[j % c];
                        chunk.iter_mut().for_each(|v| *v = *v * a);
                    }
                }
                standardize_backward(&mut d, &xhat, &inv_std, glen);
                Tensor::new(&xs, d).unwrap()
            });
            let mut res = vec![gx];
            if let Some(gm) = gamma {
                res.push(ctx.needs(gm).then(|| {
                    let mut d = vec![T::zero(); c];
                    for (j, (gc, xc)) in gd.chunks(s).zip(xhat.chunks(s)).enumerate() {
                        d[j % c] = d[j % c] + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    }
                    Tensor::new(&[c], d).unwrap()
                }));
            }
            if let Some(bt) = beta {
                res.push(ctx.needs(bt).then(|| {
                    let mut d = vec![T::zero(); c];
                    for (j, gc) in gd.chunks(s).enumerate() {
                        d[j % c] = d[j % c] + gc.iter().copied().sum();
                    }
                    Tensor::new(&[c], d).unwrap()
                }));
            }
            res
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err!("layer_norm on a rank-0 value"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err!("layer_norm: affine {:?}, expected [{d}]", self.shape(p)));
            }
        }
        let (xhat, inv_std) = standardize(self.value(x).data(), d, T::lit(eps));
        let mut out = xhat.clone();
        {
            let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
            for row in out.chunks_mut(d) {
                for ((v, &a), &b) in row.iter_mut().zip(gm).zip(bt) {
                    *v = *v * a + b;
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(out, vec![x, gamma, beta], move |ctx, g| {
            let gd = g.data();
            let gx = ctx.needs(x).then(|| {
                let gm = ctx.value(gamma).data();
                let mut dd = gd.to_vec();
                for row in dd.chunks_mut(d) {
                    row.iter_mut().zip(gm).for_each(|(v, &a)| *v = *v * a);
                }
                standardize_backward(&mut dd, &xhat, &inv_std, d);
                Tensor::new(&xs, dd).unwrap()
            });
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for (grow, xrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                for j in 0..d {
                    gg[j] = gg[j] + grow[j] * xrow[j];
                    gb[j] = gb[j] + grow[j];
                }
            }
            vec![
                gx,
                Some(Tensor::new(&[d], gg).unwrap()),
                Some(Tensor::new(&[d], gb).unwrap()),
            ]
        }))
    }
}
