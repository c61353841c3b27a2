//! Elementwise, structural and reduction operations.

use super::graph::{Graph, Var};
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("{op}: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Splits an `[N, C, ...]` shape into `(N, C, spatial)`.
pub(crate) fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let s = shape.iter().skip(2).product();
    (n, c, s)
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, vec![a, b], |_, g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, vec![a, b], |_, g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, vec![a, b], move |ctx, g| {
            let ga = ctx.needs(a).then(|| g.zip_map(ctx.value(b), |u, y| u * y).unwrap());
            let gb = ctx.needs(b).then(|| g.zip_map(ctx.value(a), |u, x| u * x).unwrap());
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, vec![a], move |_, g| vec![Some(g.map(|u| u * factor))])
    }

    /// Sum of a list of equally shaped values.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items.split_first().ok_or_else(|| shape_err!("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, vec![a], move |_, g| vec![Some(g.clone().reshape(&in_shape).unwrap())]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut sig = x.map(|v| -v);
        T::exp_in_place(sig.data_mut());
        sig.data_mut().iter_mut().for_each(|e| *e = T::one() / (T::one() + *e));
        let out = x.zip_map(&sig, |v, s| v * s).expect("same shape");
        self.push(out, vec![a], move |ctx, g| {
            let mut d = g.zip_map(&sig, |u, s| u * s).expect("same shape");
            for ((d, &s), &x) in d.data_mut().iter_mut().zip(sig.data()).zip(ctx.value(a).data()) {
                *d = *d * (T::one() + x * (T::one() - s));
            }
            vec![Some(d)]
        })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, vec![a], move |ctx, g| {
            let d = g.zip_map(ctx.value(a), |u, x| {
                if x > T::zero() {
                    u
                } else if x < T::zero() {
                    -u
                } else {
                    T::zero()
                }
            });
            vec![Some(d.unwrap())]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, vec![a], move |_, g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().map(|&x| x * x).sum());
        self.push(out, vec![a], move |ctx, g| {
            let two_u = g.item() + g.item();
            vec![Some(ctx.value(a).map(|x| two_u * x))]
        })
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// `x @ w^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear: input {:?}, weight {:?}", xs, ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias {:?}, expected [{dout}]", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        gemm(n, din, dout, T::one(), self.value(x).data(), false, self.value(w).data(), true, T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o = *o + bv;
                }
            }
        }
        let out = Tensor::new(&[n, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, inputs, move |ctx, g| {
            let gd = g.data();
            let gx = ctx.needs(x).then(|| {
                let mut d = vec![T::zero(); n * din];
                gemm(n, dout, din, T::one(), gd, false, ctx.value(w).data(), false, T::zero(), &mut d);
                Tensor::new(&[n, din], d).unwrap()
            });
            let gw = ctx.needs(w).then(|| {
                let mut d = vec![T::zero(); dout * din];
                gemm(dout, n, din, T::one(), gd, true, ctx.value(x).data(), false, T::zero(), &mut d);
                Tensor::new(&[dout, din], d).unwrap()
            });
            let mut res = vec![gx, gw];
            if let Some(b) = b {
                res.push(ctx.needs(b).then(|| {
                    let mut d = vec![T::zero(); dout];
                    for row in gd.chunks(dout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(&[dout], d).unwrap()
                }));
            }
            res
        }))
    }

    /// Broadcast affine modulation `x * scale + shift` where `x: [N, C, ...]`
    /// and `scale, shift: [N, C]` apply to every spatial position.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x));
        for v in [scale, shift] {
            if self.shape(v) != [n, c] {
                return Err(shape_err!(
                    "modulate: expected [{n}, {c}] modulation for {:?}, got {:?}",
                    self.shape(x),
                    self.shape(v)
                ));
            }
        }
        let xs = self.shape(x).to_vec();
        let mut out = self.value(x).clone();
        {
            let sc = self.value(scale).data();
            let sh = self.value(shift).data();
            for (nc, chunk) in out.data_mut().chunks_mut(s).enumerate() {
                let (a, b) = (sc[nc], sh[nc]);
                for v in chunk {
                    *v = *v * a + b;
                }
            }
        }
        Ok(self.push(out, vec![x, scale, shift], move |ctx, g| {
            let gd = g.data();
            let gx = ctx.needs(x).then(|| {
                let sc = ctx.value(scale).data();
                let mut d = gd.to_vec();
                for (nc, chunk) in d.chunks_mut(s).enumerate() {
                    for v in chunk {
                        *v = *v * sc[nc];
                    }
                }
                Tensor::new(&xs, d).unwrap()
            });
            let gs = ctx.needs(scale).then(|| {
                let xd = ctx.value(x).data();
                let d = (0..n * c)
                    .map(|nc| {
                        let r = nc * s..(nc + 1) * s;
                        gd[r.clone()].iter().zip(&xd[r]).map(|(&u, &v)| u * v).sum()
                    })
                    .collect();
                Tensor::new(&[n, c], d).unwrap()
            });
            let gb = ctx.needs(shift).then(|| {
                let d = (0..n * c).map(|nc| gd[nc * s..(nc + 1) * s].iter().copied().sum()).collect();
                Tensor::new(&[n, c], d).unwrap()
            });
            vec![gx, gs, gb]
        }))
    }

    /// Concatenates `[N, C1, H, W]` and `[N, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err!("concat_channels: {:?} vs {:?}", sa, sb));
        }
        let (n, ca, cb, s) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut out = Vec::with_capacity(n * (ca + cb) * s);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..n {
                out.extend_from_slice(&ad[i * ca * s..(i + 1) * ca * s]);
                out.extend_from_slice(&bd[i * cb * s..(i + 1) * cb * s]);
            }
        }
        let out = Tensor::new(&[n, ca + cb, sa[2], sa[3]], out)?;
        Ok(self.push(out, vec![a, b], move |_, g| {
            let gd = g.data();
            let mut ga = Vec::with_capacity(n * ca * s);
            let mut gb = Vec::with_capacity(n * cb * s);
            for i in 0..n {
                let base = i * (ca + cb) * s;
                ga.extend_from_slice(&gd[base..base + ca * s]);
                gb.extend_from_slice(&gd[base + ca * s..base + (ca + cb) * s]);
            }
            vec![Some(Tensor::new(&sa, ga).unwrap()), Some(Tensor::new(&sb, gb).unwrap())]
        }))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(shape_err!("upsample2x expects NCHW, got {:?}", sa));
        }
        let (nc, h, w) = (sa[0] * sa[1], sa[2], sa[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); nc * h2 * w2];
        {
            let ad = self.value(a).data();
            for p in 0..nc {
                for y in 0..h2 {
                    for x in 0..w2 {
                        out[p * h2 * w2 + y * w2 + x] = ad[p * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
        }
        let out = Tensor::new(&[sa[0], sa[1], h2, w2], out)?;
        Ok(self.push(out, vec![a], move |_, g| {
            let gd = g.data();
            let mut d = vec![T::zero(); nc * h * w];
            for p in 0..nc {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let t = &mut d[p * h * w + (y / 2) * w + x / 2];
                        *t = *t + gd[p * h2 * w2 + y * w2 + x];
                    }
                }
            }
            vec![Some(Tensor::new(&sa, d).unwrap())]
        }))
    }

    /// Global average pool `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(shape_err!("mean_spatial expects NCHW, got {:?}", sa));
        }
        let (n, c, s) = ncs(&sa);
        let inv = T::one() / T::lit(s as f64);
        let d = self.value(a).data().chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&[n, c], d)?;
        Ok(self.push(out, vec![a], move |_, g| {
            let mut d = Vec::with_capacity(n * c * s);
            for &u in g.data() {
                d.extend(std::iter::repeat_n(u * inv, s));
            }
            vec![Some(Tensor::new(&sa, d).unwrap())]
        }))
    }

    /// Columns `[start, end)` of a `[N, D]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start >= end || end > sa[1] {
            return Err(shape_err!("slice_cols [{start}, {end}) of {:?}", sa));
        }
        let (n, d, w) = (sa[0], sa[1], end - start);
        let mut out = Vec::with_capacity(n * w);
        for row in self.value(a).data().chunks(d) {
            out.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(&[n, w], out)?;
        Ok(self.push(out, vec![a], move |_, g| {
            let mut dd = vec![T::zero(); n * d];
            for (row, grow) in dd.chunks_mut(d).zip(g.data().chunks(w)) {
                row[start..end].copy_from_slice(grow);
            }
            vec![Some(Tensor::new(&sa, dd).unwrap())]
        }))
    }

    /// `a` with columns `[start, end)` taken from `b`; both `[N, D]`.
    pub fn splice_cols(&mut self, a: Var, b: Var, start: usize, end: usize) -> Result<Var> {
        same_shape(self, a, b, "splice_cols")?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start > end || end > sa[1] {
            return Err(shape_err!("splice_cols [{start}, {end}) of {:?}", sa));
        }
        let d = sa[1];
        let mut out = self.value(a).clone();
        for (row, brow) in out.data_mut().chunks_mut(d).zip(self.value(b).data().chunks(d)) {
            row[start..end].copy_from_slice(&brow[start..end]);
        }
        Ok(self.push(out, vec![a, b], move |_, g| {
            let mut ga = g.clone();
            let mut gb = Tensor::zeros(g.shape());
            for (ra, (rb, rg)) in ga
                .data_mut()
                .chunks_mut(d)
                .zip(gb.data_mut().chunks_mut(d).zip(g.data().chunks(d)))
            {
                ra[start..end].iter_mut().for_each(|v| *v = T::zero());
                rb[start..end].copy_from_slice(&rg[start..end]);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Rows of `a` selected (with repetition allowed) along the leading axis.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let per: usize = sa[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa[0]) {
            return Err(shape_err!("gather_rows: index {bad} out of {}", sa[0]));
        }
        let mut out = Vec::with_capacity(idx.len() * per);
        {
            let ad = self.value(a).data();
            for &i in idx {
                out.extend_from_slice(&ad[i * per..(i + 1) * per]);
            }
        }
        let mut shape = sa.clone();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, out)?;
        let idx = idx.to_vec();
        Ok(self.push(out, vec![a], move |_, g| {
            let mut d = vec![T::zero(); sa.iter().product()];
            for (k, &i) in idx.iter().enumerate() {
                for (t, &u) in d[i * per..(i + 1) * per].iter_mut().zip(&g.data()[k * per..(k + 1) * per]) {
                    *t = *t + u;
                }
            }
            vec![Some(Tensor::new(&sa, d).unwrap())]
        }))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, items: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = items.iter().map(|&v| self.value(v).clone()).collect();
        let out = Tensor::cat_batch(&values)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
        Ok(self.push(out, items.to_vec(), move |_, g| {
            let mut off = 0;
            shapes
                .iter()
                .map(|s| {
                    let len: usize = s.iter().product();
                    let piece = Tensor::new(s, g.data()[off..off + len].to_vec()).unwrap();
                    off += len;
                    Some(piece)
                })
                .collect()
        }))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() || labels.iter().any(|&l| l >= sl[1]) {
            return Err(shape_err!("cross_entropy: logits {:?}, {} labels", sl, labels.len()));
        }
        let (n, k) = (sl[0], sl[1]);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss = loss - (row[labels[i]] - m - z.ln());
        }
        let nn = T::lit(n as f64);
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss / nn), vec![logits], move |_, g| {
            let u = g.item() / nn;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] = d[i * k + l] - T::one();
            }
            d.iter_mut().for_each(|v| *v = *v * u);
            vec![Some(Tensor::new(&[n, k], d).unwrap())]
        }))
    }
}
