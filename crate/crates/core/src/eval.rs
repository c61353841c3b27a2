//! Quantitative and qualitative evaluation: the perplexity matrix,
//! interpolation, the path-length proxy, reconstruction metrics, and
//! attribute manipulation with its render-matching oracle.

use std::collections::BTreeMap;

use crate::dataset::{self, AttributeTuple, CARDINALITIES, DATASET_LEN};
use crate::ddim::{self, Conditional, SamplerConfig};
use crate::error::{shape_err, Error, Result};
use crate::gae::AttributeLayout;
use crate::nn::{ParamStore, Tensor};
use crate::rng::Rng;
use crate::training::Pipeline;

pub fn lerp(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(shape_err!("lerp of lengths {} and {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect())
}

/// Interpolation along the great circle through `a` and `b` (scaled
/// linearly in norm), falling back to [`lerp`] when the angle is below 1e-4.
pub fn slerp(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(shape_err!("slerp of lengths {} and {}", a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("slerp of a zero vector".into()));
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-4 {
        return lerp(a, b, alpha);
    }
    let s = omega.sin();
    if s < 1e-12 {
        return Err(Error::InvalidArgument("slerp between opposite vectors is undefined".into()));
    }
    let (wa, wb) = (((1.0 - alpha) * omega).sin() / s, (alpha * omega).sin() / s);
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn from_f64(shape: &[usize], v: &[f64]) -> Result<Tensor<f32>> {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect())
}

/// Accuracy of a linear probe from latent partition `row` to attribute `col`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityMatrix {
    pub attributes: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
}

impl PerplexityMatrix {
    pub fn chance(&self, col: usize) -> f64 {
        1.0 / CARDINALITIES[col] as f64
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.accuracy.len()).map(|i| self.accuracy[i][i]).collect()
    }

    /// Largest off-diagonal excess over chance.
    pub fn max_off_diagonal_excess(&self) -> f64 {
        let m = self.accuracy.len();
        (0..m)
            .flat_map(|r| (0..m).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| self.accuracy[r][c] - self.chance(c))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("partition,attribute,accuracy,chance\n");
        for (r, row) in self.accuracy.iter().enumerate() {
            for (c, acc) in row.iter().enumerate() {
                s += &format!("{},{},{acc:.6},{:.6}\n", self.attributes[r], self.attributes[c], self.chance(c));
            }
        }
        s
    }
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardised features.
#[derive(Clone, Debug)]
pub struct SoftmaxClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

impl SoftmaxClassifier {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, steps: usize, lr: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() || y.iter().any(|&c| c >= classes) {
            return Err(Error::InvalidArgument("classifier needs matching, in-range labels".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
            })
            .collect();
        let mut clf = Self { mean, scale, weights: vec![vec![0.0; d + 1]; classes] };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| clf.standardise(r)).collect();
        let mut prev = f64::INFINITY;
        for _ in 0..steps {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            let mut loss = 0.0;
            for (xi, &yi) in xs.iter().zip(y) {
                let p = clf.probs_std(xi);
                loss -= p[yi].max(1e-300).ln();
                for (k, gk) in grad.iter_mut().enumerate() {
                    let e = p[k] - f64::from(k == yi);
                    for j in 0..d {
                        gk[j] += e * xi[j];
                    }
                    gk[d] += e;
                }
            }
            loss /= n;
            for (w, g) in clf.weights.iter_mut().zip(&grad) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj -= lr * gj / n;
                }
            }
            if (prev - loss).abs() < 1e-6 {
                break;
            }
            prev = loss;
        }
        Ok(clf)
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probs_std(&self, xs: &[f64]) -> Vec<f64> {
        let d = xs.len();
        let logits: Vec<f64> =
            self.weights.iter().map(|w| w[d] + w[..d].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs_std(&self.standardise(x));
        (0..p.len()).fold(0, |best, k| if p[k] > p[best] { k } else { best })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// Probes every (partition, attribute) pair: fit on the training split using
/// only the partition's slice, score on the held-out split.
pub fn perplexity_matrix(
    codes: &[(AttributeTuple, Vec<f64>)],
    layout: &AttributeLayout,
    split_seed: u64,
    steps: usize,
    lr: f64,
) -> Result<PerplexityMatrix> {
    if layout.len() != CARDINALITIES.len() {
        return Err(Error::InvalidArgument("layout does not match the dataset attributes".into()));
    }
    let by_index: BTreeMap<usize, &Vec<f64>> = codes.iter().map(|(t, z)| (t.index(), z)).collect();
    if by_index.len() != DATASET_LEN {
        return Err(Error::InvalidArgument(format!("need codes for all {DATASET_LEN} tuples")));
    }
    if codes.iter().any(|(_, z)| z.len() != layout.width()) {
        return Err(shape_err!("codes are not {} wide", layout.width()));
    }
    let (train, test) = dataset::split(split_seed);
    let m = layout.len();
    let mut accuracy = vec![vec![0.0; m]; m];
    for (r, row) in accuracy.iter_mut().enumerate() {
        let range = layout.range(r);
        let feats = |idx: &[usize]| idx.iter().map(|i| by_index[i][range.clone()].to_vec()).collect::<Vec<_>>();
        let (xtr, xte) = (feats(&train), feats(&test));
        for (c, cell) in row.iter_mut().enumerate() {
            let label = |idx: &[usize]| {
                idx.iter().map(|&i| AttributeTuple::from_index(i).expect("in range").values()[c]).collect::<Vec<_>>()
            };
            let clf = SoftmaxClassifier::fit(&xtr, &label(&train), CARDINALITIES[c], steps, lr)?;
            *cell = clf.accuracy(&xte, &label(&test));
        }
    }
    Ok(PerplexityMatrix { attributes: layout.attributes().iter().map(|a| a.name.clone()).collect(), accuracy })
}

/// Mean squared error and mean single-scale SSIM (11x11 Gaussian window,
/// sigma 1.5, valid positions only) of images in `[-1, 1]`, per channel.
pub fn recon_metrics(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, f64)> {
    a.expect_same_shape(b)?;
    let s = a.shape();
    if !(s.len() == 3 || s.len() == 4) {
        return Err(shape_err!("images must be [C,H,W] or [N,C,H,W], got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let range = p * h * w..(p + 1) * h * w;
        let to01 = |v: &[f32]| v.iter().map(|&x| (x as f64 + 1.0) * 0.5).collect::<Vec<_>>();
        total += ssim_plane(&to01(&a.data()[range.clone()]), &to01(&b.data()[range]), h, w)?;
    }
    Ok((mse, total / planes as f64))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / s).collect();
    (0..SSIM_WIN * SSIM_WIN).map(|k| g[k / SSIM_WIN] * g[k % SSIM_WIN]).collect()
}

/// SSIM of two `[0, 1]` planes.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} images")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gaussian_window();
    let mut total = 0.0;
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WIN {
                for kx in 0..SSIM_WIN {
                    let g = win[ky * SSIM_WIN + kx];
                    let i = (oy + ky) * w + ox + kx;
                    mx += g * x[i];
                    my += g * y[i];
                    xx += g * x[i] * x[i];
                    yy += g * y[i] * y[i];
                    xy += g * x[i] * y[i];
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Path-length estimate `E[d(G(slerp(a, b, u)), G(slerp(a, b, u + eps))) / eps^2]`
/// with `u ~ U(0, 1 - eps)` per pair and `d` the squared L2 distance between
/// the generator's outputs. `generate` maps a batch of latents to features.
pub fn ppl(
    pairs: &[(Vec<f64>, Vec<f64>)],
    epsilon: f64,
    rng: &mut Rng,
    generate: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
) -> Result<f64> {
    ppl_along(pairs, epsilon, rng, |a: &Vec<f64>, b: &Vec<f64>, u| slerp(a, b, u), generate)
}

/// As [`ppl`] with a caller-chosen path between the two latents.
pub fn ppl_along<L>(
    pairs: &[(L, L)],
    epsilon: f64,
    rng: &mut Rng,
    path: impl Fn(&L, &L, f64) -> Result<Vec<f64>>,
    mut generate: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument("epsilon must be in (0, 1)".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs".into()));
    }
    let mut lat = Vec::with_capacity(2 * pairs.len());
    for (a, b) in pairs {
        let u = rng.uniform() * (1.0 - epsilon);
        lat.push(path(a, b, u)?);
        lat.push(path(a, b, u + epsilon)?);
    }
    let out = generate(&lat)?;
    if out.len() != lat.len() {
        return Err(Error::InvalidArgument("generator changed the batch size".into()));
    }
    let total: f64 = out
        .chunks(2)
        .map(|p| p[0].iter().zip(&p[1]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (epsilon * epsilon))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Where the starting noise of a manipulated image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSource {
    /// DDIM inversion of the first attribute's donor.
    Inferred,
    /// `N(0, I)` from a seeded stream.
    Random(u64),
}

/// A trained pipeline with its parameters and sampling ladder.
pub struct Model<'a> {
    pub pipe: &'a Pipeline,
    pub params: &'a ParamStore<f32>,
    pub sampler: SamplerConfig,
}

impl<'a> Model<'a> {
    pub fn new(pipe: &'a Pipeline, params: &'a ParamStore<f32>, sample_steps: usize) -> Result<Self> {
        let sampler = SamplerConfig::new(sample_steps);
        sampler.ladder(&pipe.schedule)?;
        for prefix in [crate::encoder::PREFIX, crate::denoiser::PREFIX, crate::gae::PREFIX] {
            if !params.names().any(|n| n.starts_with(prefix)) {
                return Err(Error::MissingPrerequisite(format!("no `{prefix}` parameters: model is not trained")));
            }
        }
        Ok(Self { pipe, params, sampler })
    }

    fn denoiser(&self) -> Conditional<'_, f32> {
        Conditional { denoiser: &self.pipe.denoiser, params: self.params }
    }

    pub fn encode_sem(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.pipe.encoder.encode(self.params, images)
    }

    pub fn z_dis(&self, z_sem: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.pipe.gae.encode(self.params, z_sem)
    }

    pub fn z_hat(&self, z_dis: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.pipe.gae.decode(self.params, z_dis)
    }

    pub fn invert(&self, x0: &Tensor<f32>, z_sem: &Tensor<f32>) -> Result<Tensor<f32>> {
        ddim::invert(&self.denoiser(), x0, z_sem, &self.sampler, &self.pipe.schedule)
    }

    pub fn sample(&self, x_t: &Tensor<f32>, z_sem: &Tensor<f32>) -> Result<Tensor<f32>> {
        ddim::sample(&self.denoiser(), z_sem, x_t, &self.sampler, &self.pipe.schedule)
    }

    /// Encode, invert, and regenerate under the image's own semantic code.
    pub fn reconstruct(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.encode_sem(images)?;
        let x_t = self.invert(images, &z)?;
        self.sample(&x_t, &z)
    }

    fn layout(&self) -> &AttributeLayout {
        &self.pipe.gae.config.layout
    }

    /// Per-image disentangled codes for a batch `[N, 3, H, W]`.
    fn codes(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.z_dis(&self.encode_sem(images)?)
    }

    /// Generates images whose attribute `name` comes from `donors[name]`.
    /// Every entry of `donors` is a batch `[N, 3, H, W]`; output is `[N, 3, H, W]`.
    pub fn manipulate(&self, donors: &BTreeMap<String, Tensor<f32>>, noise: NoiseSource) -> Result<Tensor<f32>> {
        let layout = self.layout().clone();
        for name in donors.keys() {
            layout.index_of(name)?;
        }
        let mut codes = BTreeMap::new();
        for a in layout.attributes() {
            let img = donors
                .get(&a.name)
                .ok_or_else(|| Error::MissingPrerequisite(format!("no donor for attribute `{}`", a.name)))?;
            codes.insert(a.name.clone(), self.codes(img)?);
        }
        let n = codes.values().next().expect("non-empty layout").dim(0);
        if codes.values().any(|c| c.dim(0) != n) {
            return Err(shape_err!("donor batches differ in size"));
        }
        let d = layout.width();
        let mut assembled = Vec::with_capacity(n * d);
        for i in 0..n {
            let rows: BTreeMap<String, &[f32]> =
                codes.iter().map(|(k, z)| (k.clone(), &z.data()[i * d..(i + 1) * d])).collect();
            assembled.extend(layout.reassemble(&rows)?);
        }
        let z_hat = self.z_hat(&Tensor::new(&[n, d], assembled)?)?;
        let first = &layout.attributes()[0].name;
        let x_t = match noise {
            NoiseSource::Inferred => {
                let img = &donors[first];
                let own = self.z_hat(&codes[first])?;
                self.invert(img, &own)?
            }
            NoiseSource::Random(seed) => {
                Rng::new(seed, crate::rng::stream::EVAL).normal_tensor(donors[first].shape())
            }
        };
        self.sample(&x_t, &z_hat)
    }

    /// Frames between two images `[3, H, W]`: the code path is a lerp of the
    /// disentangled codes (only `attr`'s slice when given, the rest held at
    /// the first image), the noise path a slerp of the inverted noises.
    pub fn interpolate(
        &self,
        a: &Tensor<f32>,
        b: &Tensor<f32>,
        alphas: &[f64],
        attr: Option<&str>,
    ) -> Result<Vec<Tensor<f32>>> {
        if alphas.is_empty() {
            return Ok(Vec::new());
        }
        let pair = Tensor::stack(&[a.clone(), b.clone()])?;
        let zd = self.codes(&pair)?;
        let z_hat = self.z_hat(&zd)?;
        let x_t = self.invert(&pair, &z_hat)?;
        let d = zd.dim(1);
        let (za, zb) = (to_f64(&zd.narrow_batch(0, 1)), to_f64(&zd.narrow_batch(1, 2)));
        let (na, nb) = (to_f64(&x_t.narrow_batch(0, 1)), to_f64(&x_t.narrow_batch(1, 2)));
        let range = match attr {
            Some(name) => self.layout().range_of(name)?,
            None => 0..d,
        };
        let codes: Vec<f64> = code_path(&za, &zb, alphas, range)?.concat();
        let mut noises = Vec::new();
        for &al in alphas {
            noises.extend(slerp(&na, &nb, al)?);
        }
        let k = alphas.len();
        let z_hat = self.z_hat(&from_f64(&[k, d], &codes)?)?;
        let mut shape = a.shape().to_vec();
        shape.insert(0, k);
        let out = self.sample(&from_f64(&shape, &noises)?, &z_hat)?;
        Ok((0..k).map(|i| out.narrow_batch(i, i + 1).reshape(a.shape()).expect("same size")).collect())
    }
}

/// Codes along the interpolation: `za` with its `range` lerped toward `zb`.
pub fn code_path(za: &[f64], zb: &[f64], alphas: &[f64], range: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>> {
    if za.len() != zb.len() || range.end > za.len() || range.start > range.end {
        return Err(shape_err!("code path over {range:?} of lengths {} and {}", za.len(), zb.len()));
    }
    alphas
        .iter()
        .map(|&al| {
            if !(0.0..=1.0).contains(&al) {
                return Err(Error::InvalidArgument(format!("alpha {al} outside [0, 1]")));
            }
            let mut z = za.to_vec();
            z[range.clone()].copy_from_slice(&lerp(&za[range.clone()], &zb[range.clone()], al)?);
            Ok(z)
        })
        .collect()
}

/// Classifies images by their nearest render in the full grid.
pub struct NearestRender {
    renders: Vec<Tensor<f32>>,
}

impl NearestRender {
    pub fn new(resolution: usize) -> Self {
        Self { renders: dataset::enumerate_dataset(resolution).into_iter().map(|(_, x)| x).collect() }
    }

    /// The tuple of the render closest in squared L2 to `img` `[3, H, W]`.
    pub fn classify(&self, img: &Tensor<f32>) -> Result<AttributeTuple> {
        let mut best = (f64::INFINITY, 0);
        for (i, r) in self.renders.iter().enumerate() {
            img.expect_same_shape(r)?;
            let d: f64 = img.data().iter().zip(r.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        AttributeTuple::from_index(best.1)
    }
}

/// How often generated images show their donors' attribute values.
#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    /// Fraction with every attribute matching its donor.
    pub all: f64,
    pub per_attribute: Vec<f64>,
    pub trials: usize,
}

/// Random recombinations: each attribute from a different random tuple,
/// sampled from random noise, judged by the nearest-render oracle.
pub fn recombination_fidelity(model: &Model, count: usize, seed: u64, batch: usize) -> Result<Fidelity> {
    let layout = model.layout().clone();
    let m = layout.len();
    let oracle = NearestRender::new(model.pipe.resolution);
    let mut rng = Rng::new(seed, crate::rng::stream::EVAL);
    let donors: Vec<Vec<AttributeTuple>> = (0..count)
        .map(|_| (0..m).map(|_| AttributeTuple::from_index(rng.below(DATASET_LEN)).expect("in range")).collect())
        .collect();
    let mut hits = vec![0usize; m];
    let mut all = 0usize;
    for (c, chunk) in donors.chunks(batch.max(1)).enumerate() {
        let mut map = BTreeMap::new();
        for (r, a) in layout.attributes().iter().enumerate() {
            let imgs: Vec<Tensor<f32>> = chunk.iter().map(|d| dataset::render(&d[r], model.pipe.resolution)).collect();
            map.insert(a.name.clone(), Tensor::stack(&imgs)?);
        }
        let out = model.manipulate(&map, NoiseSource::Random(seed ^ ((c as u64 + 1) << 32)))?;
        for (i, d) in chunk.iter().enumerate() {
            let got = oracle.classify(&out.narrow_batch(i, i + 1).reshape(&out.shape()[1..])?)?;
            let ok: Vec<bool> = (0..m).map(|r| got.values()[r] == d[r].values()[r]).collect();
            for r in 0..m {
                hits[r] += usize::from(ok[r]);
            }
            all += usize::from(ok.iter().all(|&b| b));
        }
    }
    Ok(Fidelity {
        all: all as f64 / count as f64,
        per_attribute: hits.iter().map(|&h| h as f64 / count as f64).collect(),
        trials: count,
    })
}

/// Disentangled codes of the whole grid, in index order.
pub fn dataset_codes(model: &Model, batch: usize) -> Result<Vec<(AttributeTuple, Vec<f64>)>> {
    let data = dataset::enumerate_dataset::<f32>(model.pipe.resolution);
    let mut out = Vec::with_capacity(data.len());
    for part in data.chunks(batch.max(1)) {
        let imgs: Vec<Tensor<f32>> = part.iter().map(|(_, x)| x.clone()).collect();
        let z = model.codes(&Tensor::stack(&imgs)?)?;
        let d = z.dim(1);
        for (k, (t, _)) in part.iter().enumerate() {
            out.push((*t, z.data()[k * d..(k + 1) * d].iter().map(|&v| v as f64).collect()));
        }
    }
    Ok(out)
}

/// Distance space for the path-length proxy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PplSpace {
    Pixel,
    /// Semantic-encoder features of the generated images.
    EncoderFeature,
}

impl Model<'_> {
    /// Path length over the interpolation path (lerp of disentangled codes,
    /// slerp of inverted noises) between pairs of images `[3, H, W]`.
    pub fn ppl(&self, pairs: &[(Tensor<f32>, Tensor<f32>)], epsilon: f64, rng: &mut Rng, space: PplSpace) -> Result<f64> {
        let Some((first, _)) = pairs.first() else {
            return Err(Error::InvalidArgument("no pairs".into()));
        };
        let shape = first.shape().to_vec();
        let d = self.layout().width();
        let mut ends = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let x = Tensor::stack(&[a.clone(), b.clone()])?;
            let zd = self.codes(&x)?;
            let x_t = self.invert(&x, &self.z_hat(&zd)?)?;
            let joined = |i: usize| [to_f64(&zd.narrow_batch(i, i + 1)), to_f64(&x_t.narrow_batch(i, i + 1))].concat();
            ends.push((joined(0), joined(1)));
        }
        let path = |a: &Vec<f64>, b: &Vec<f64>, u: f64| -> Result<Vec<f64>> {
            Ok([lerp(&a[..d], &b[..d], u)?, slerp(&a[d..], &b[d..], u)?].concat())
        };
        let generate = |lat: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            let n = lat.len();
            let codes: Vec<f64> = lat.iter().flat_map(|l| l[..d].to_vec()).collect();
            let noise: Vec<f64> = lat.iter().flat_map(|l| l[d..].to_vec()).collect();
            let mut s = shape.clone();
            s.insert(0, n);
            let img = self.sample(&from_f64(&s, &noise)?, &self.z_hat(&from_f64(&[n, d], &codes)?)?)?;
            let feats = match space {
                PplSpace::Pixel => img,
                PplSpace::EncoderFeature => self.encode_sem(&img)?,
            };
            let per = feats.numel() / n;
            Ok((0..n).map(|i| feats.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect()).collect())
        };
        ppl_along(&ends, epsilon, rng, path, generate)
    }
}

/// Every metric of a trained run.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub recon_mse: f64,
    pub recon_ssim: f64,
    pub perplexity: PerplexityMatrix,
    pub fidelity: Fidelity,
    /// `(ladder length, estimate)`.
    pub ppl: Vec<(usize, f64)>,
}

impl EvalReport {
    /// `metric,value` rows; FID and LPIPS need external networks and are not computed.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("recon_mse,{:.6e}\nrecon_ssim,{:.6}\n", self.recon_mse, self.recon_ssim);
        s += &format!("recombination_fidelity,{:.4}\n", self.fidelity.all);
        for (r, a) in self.perplexity.attributes.iter().enumerate() {
            s += &format!("recombination_fidelity_{a},{:.4}\n", self.fidelity.per_attribute[r]);
        }
        for (t, v) in &self.ppl {
            s += &format!("ppl_T{t},{v:.6e}\n");
        }
        s += "fid,not computed\nlpips,not computed\n";
        s
    }
}

/// Which parts of [`evaluate`] to run, with their sizes.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub cfg: crate::config::EvalConfig,
    pub seed: u64,
    pub ppl_ladders: Vec<usize>,
}

/// Reconstruction, perplexity, recombination fidelity, and path length.
pub fn evaluate(model: &Model, plan: &EvalPlan) -> Result<EvalReport> {
    let cfg = &plan.cfg;
    let res = model.pipe.resolution;
    let mut rng = Rng::new(plan.seed, crate::rng::stream::EVAL);

    let picks = rng.choose_distinct(DATASET_LEN, cfg.recon_images.min(DATASET_LEN));
    let mut sq = 0.0;
    let mut ssim = 0.0;
    for chunk in picks.chunks(48) {
        let imgs: Vec<Tensor<f32>> =
            chunk.iter().map(|&i| dataset::render(&AttributeTuple::from_index(i).expect("in range"), res)).collect();
        let x = Tensor::stack(&imgs)?;
        let (m, s) = recon_metrics(&x, &model.reconstruct(&x)?)?;
        sq += m * chunk.len() as f64;
        ssim += s * chunk.len() as f64;
    }
    let n = picks.len().max(1) as f64;

    let codes = dataset_codes(model, 96)?;
    let perplexity = perplexity_matrix(&codes, model.layout(), cfg.split_seed, cfg.classifier_steps, cfg.classifier_lr)?;
    let fidelity = recombination_fidelity(model, cfg.recombinations, plan.seed, 50)?;

    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = (0..cfg.ppl_pairs)
        .map(|_| {
            let p = rng.choose_distinct(DATASET_LEN, 2);
            let r = |i: usize| dataset::render(&AttributeTuple::from_index(i).expect("in range"), res);
            (r(p[0]), r(p[1]))
        })
        .collect();
    let mut ppl = Vec::new();
    for &t in &plan.ppl_ladders {
        let m = Model { pipe: model.pipe, params: model.params, sampler: SamplerConfig::new(t) };
        let mut r = Rng::new(plan.seed ^ t as u64, crate::rng::stream::EVAL);
        ppl.push((t, m.ppl(&pairs, cfg.ppl_epsilon, &mut r, PplSpace::EncoderFeature)?));
    }
    Ok(EvalReport { recon_mse: sq / n, recon_ssim: ssim / n, perplexity, fidelity, ppl })
}
