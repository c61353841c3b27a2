//! 2-D cross-correlation via im2col and one matrix product per sample.
//! (Batching samples into one wide product measured slower on this kernel.)

use super::graph::{Graph, Var};
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input image already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Writes the column matrix of one sample; row `r` starts at `col[r * ld]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T], ld: usize) {
        let l = self.l();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * ld..row * ld + l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                            drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                            if lo < hi {
                                let off = lo + kx - self.pad;
                                drow[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Output columns `[lo, hi)` whose stride-1 input column for kernel
    /// offset `kx` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T], ld: usize) {
        let l = self.l();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * ld..row * ld + l];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_cols(kx);
                            if lo < hi {
                                let off = lo + kx - self.pad;
                                for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d = *d + v;
                                }
                            }
                            continue;
                        }
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err!("conv2d: input {:?}, weight {:?}", xs, ws));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be at least 1"));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, l) = (geom.k(), geom.l());
        let in_per = cin * h * wd;
        let mut out = vec![T::zero(); n * cout * l];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
            for i in 0..n {
                let xi = &xd[i * in_per..(i + 1) * in_per];
                let src: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    geom.im2col(xi, &mut col, l);
                    &col
                };
                gemm(cout, k, l, T::one(), wdata, false, src, false, T::zero(), &mut out[i * cout * l..(i + 1) * cout * l]);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (j, chunk) in out.chunks_mut(l).enumerate() {
                    let bv = bd[j % cout];
                    chunk.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        let out = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, inputs, move |ctx, g| {
            let gd = g.data();
            let xd = ctx.value(x).data();
            let wdata = ctx.value(w).data();
            let need_x = ctx.needs(x);
            let need_w = ctx.needs(w);
            let mut gw = need_w.then(|| vec![T::zero(); cout * k]);
            let mut gx = need_x.then(|| vec![T::zero(); n * in_per]);
            let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
            for i in 0..n {
                let gi = &gd[i * cout * l..(i + 1) * cout * l];
                if let Some(gw) = gw.as_mut() {
                    let xi = &xd[i * in_per..(i + 1) * in_per];
                    let src: &[T] = if geom.is_pointwise() {
                        xi
                    } else {
                        geom.im2col(xi, &mut col, l);
                        &col
                    };
                    gemm(cout, l, k, T::one(), gi, false, src, true, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * in_per..(i + 1) * in_per];
                    if geom.is_pointwise() {
                        gemm(k, cout, l, T::one(), wdata, true, gi, false, T::zero(), dst);
                    } else {
                        gemm(k, cout, l, T::one(), wdata, true, gi, false, T::zero(), &mut col);
                        geom.col2im(&col, dst, l);
                    }
                }
            }
            let mut res = vec![
                gx.map(|d| Tensor::new(&[n, cin, h, wd], d).unwrap()),
                gw.map(|d| Tensor::new(&[cout, cin, kh, kw], d).unwrap()),
            ];
            if let Some(b) = b {
                res.push(ctx.needs(b).then(|| {
                    let mut d = vec![T::zero(); cout];
                    for (j, chunk) in gd.chunks(l).enumerate() {
                        d[j % cout] = d[j % cout] + chunk.iter().copied().sum();
                    }
                    Tensor::new(&[cout], d).unwrap()
                }));
            }
            res
        }))
    }
}
