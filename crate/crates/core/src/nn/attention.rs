//! Multi-head scaled dot-product attention over spatial positions.

use super::graph::{Graph, Var};
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct Layout {
    n: usize,
    c: usize,
    dh: usize,
    l: usize,
}

impl Layout {
    fn of(shape: &[usize], heads: usize) -> Result<Self> {
        if shape.len() != 4 || !shape[1].is_multiple_of(3) {
            return Err(shape_err!("attention expects [N, 3C, H, W], got {:?}", shape));
        }
        let c = shape[1] / 3;
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(shape_err!("attention: {c} channels not divisible into {heads} heads"));
        }
        Ok(Self { n: shape[0], c, dh: c / heads, l: shape[2] * shape[3] })
    }

    /// Offsets of the q, k, v blocks (`[dh, L]` each) for sample `i`, head `h`.
    fn qkv_offsets(&self, i: usize, h: usize) -> (usize, usize, usize) {
        let base = i * 3 * self.c * self.l;
        let q = base + h * self.dh * self.l;
        (q, q + self.c * self.l, q + 2 * self.c * self.l)
    }

    fn out_offset(&self, i: usize, h: usize) -> usize {
        (i * self.c + h * self.dh) * self.l
    }
}

fn softmax_rows<T: Scalar>(m: &mut [T], width: usize) {
    for row in m.chunks_mut(width) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = *v - mx);
        T::exp_in_place(row);
        let inv = T::one() / row.iter().copied().sum::<T>();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Attention probabilities `[N, heads, L, L]` for packed `qkv: [N, 3C, H, W]`.
pub fn attention_weights<T: Scalar>(qkv: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let lay = Layout::of(qkv.shape(), heads)?;
    let scale = T::one() / T::lit(lay.dh as f64).sqrt();
    let (l, dh) = (lay.l, lay.dh);
    let mut probs = vec![T::zero(); lay.n * heads * l * l];
    let d = qkv.data();
    for i in 0..lay.n {
        for h in 0..heads {
            let (qo, ko, _) = lay.qkv_offsets(i, h);
            let p = &mut probs[(i * heads + h) * l * l..][..l * l];
            gemm(l, dh, l, scale, &d[qo..qo + dh * l], true, &d[ko..ko + dh * l], false, T::zero(), p);
            softmax_rows(p, l);
        }
    }
    Tensor::new(&[lay.n, heads, l, l], probs)
}

impl<T: Scalar> Graph<T> {
    /// Attention core: packed `qkv: [N, 3C, H, W]` to `[N, C, H, W]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        let lay = Layout::of(&shape, heads)?;
        let probs = attention_weights(self.value(qkv), heads)?;
        let (l, dh) = (lay.l, lay.dh);
        let mut out = vec![T::zero(); lay.n * lay.c * l];
        {
            let d = self.value(qkv).data();
            let pd = probs.data();
            for i in 0..lay.n {
                for h in 0..heads {
                    let (_, _, vo) = lay.qkv_offsets(i, h);
                    let p = &pd[(i * heads + h) * l * l..][..l * l];
                    let o = &mut out[lay.out_offset(i, h)..][..dh * l];
                    gemm(dh, l, l, T::one(), &d[vo..vo + dh * l], false, p, true, T::zero(), o);
                }
            }
        }
        let out = Tensor::new(&[lay.n, lay.c, shape[2], shape[3]], out)?;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        Ok(self.push(out, vec![qkv], move |ctx, g| {
            let d = ctx.value(qkv).data();
            let gd = g.data();
            let pd = probs.data();
            let mut gqkv = vec![T::zero(); d.len()];
            let mut gp = vec![T::zero(); l * l];
            for i in 0..lay.n {
                for h in 0..heads {
                    let (qo, ko, vo) = lay.qkv_offsets(i, h);
                    let p = &pd[(i * heads + h) * l * l..][..l * l];
                    let go = &gd[lay.out_offset(i, h)..][..dh * l];
                    gemm(dh, l, l, T::one(), go, false, p, false, T::zero(), &mut gqkv[vo..vo + dh * l]);
                    gemm(l, dh, l, T::one(), go, true, &d[vo..vo + dh * l], false, T::zero(), &mut gp);
                    for (grow, prow) in gp.chunks_mut(l).zip(p.chunks(l)) {
                        let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (gv, &pv) in grow.iter_mut().zip(prow) {
                            *gv = pv * (*gv - dot);
                        }
                    }
                    gemm(dh, l, l, scale, &d[ko..ko + dh * l], false, &gp, true, T::zero(), &mut gqkv[qo..qo + dh * l]);
                    gemm(dh, l, l, scale, &d[qo..qo + dh * l], false, &gp, false, T::zero(), &mut gqkv[ko..ko + dh * l]);
                }
            }
            vec![Some(Tensor::new(&shape, gqkv).unwrap())]
        }))
    }
}
