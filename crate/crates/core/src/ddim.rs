//! Deterministic (sigma = 0) DDIM sampling and inversion, and the noise
//! prediction loss used to train the encoder/denoiser pair.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::encoder::SemanticEncoder;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;
use crate::schedules::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Always 0: only the deterministic sampler exists.
    #[serde(default)]
    pub sigma: f64,
}

impl SamplerConfig {
    pub fn new(n_steps: usize) -> Self {
        Self { n_steps, sigma: 0.0 }
    }

    /// Uniformly strided timesteps `floor(i * T / n)`, ascending.
    pub fn ladder(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        let t = sched.steps();
        if self.n_steps == 0 || self.n_steps > t {
            return Err(Error::InvalidArgument(format!("n_steps {} must be in 1..={t}", self.n_steps)));
        }
        if self.sigma != 0.0 {
            return Err(Error::InvalidArgument("only sigma = 0 is supported".into()));
        }
        Ok((0..self.n_steps).map(|i| i * t / self.n_steps).collect())
    }
}

/// Anything that predicts the noise in `x_t` at one shared timestep.
pub trait EpsModel<T: Scalar> {
    fn eps(&self, x_t: &Tensor<T>, t: usize, z_sem: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A trained denoiser bound to its parameters.
pub struct Conditional<'a, T> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> EpsModel<T> for Conditional<'_, T> {
    fn eps(&self, x_t: &Tensor<T>, t: usize, z_sem: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        self.denoiser.predict_eps(self.params, x_t, &vec![t; n], z_sem)
    }
}

impl<T: Scalar, F> EpsModel<T> for F
where
    F: Fn(&Tensor<T>, usize, &Tensor<T>) -> Result<Tensor<T>>,
{
    fn eps(&self, x_t: &Tensor<T>, t: usize, z_sem: &Tensor<T>) -> Result<Tensor<T>> {
        self(x_t, t, z_sem)
    }
}

/// Predicted clean sample `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, alpha_bar_t: f64) -> Result<Tensor<T>> {
    let a = T::lit(alpha_bar_t.sqrt());
    let s = T::lit((1.0 - alpha_bar_t).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - s * e) / a)
}

/// Moves `x_t` to timestep `to` (either direction) keeping `eps_hat` fixed.
fn transfer<T: Scalar>(sched: &NoiseSchedule, x_t: &Tensor<T>, from: i64, to: i64, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let ab_from = sched.alpha_bar_at(from)?;
    let ab_to = sched.alpha_bar_at(to)?;
    let x0 = predict_x0(x_t, eps_hat, ab_from)?;
    let a = T::lit(ab_to.sqrt());
    let s = T::lit((1.0 - ab_to).sqrt());
    x0.zip_map(eps_hat, |x, e| a * x + s * e)
}

/// One deterministic denoising step from `t` down to `t_prev` (`-1` is the
/// data endpoint).
pub fn ddim_step<T: Scalar>(
    sched: &NoiseSchedule,
    x_t: &Tensor<T>,
    t: i64,
    t_prev: i64,
    eps_hat: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!("ddim_step needs t > t_prev, got {t} <= {t_prev}")));
    }
    transfer(sched, x_t, t, t_prev, eps_hat)
}

/// One deterministic noising step from `t` up to `t_next`.
pub fn invert_step<T: Scalar>(
    sched: &NoiseSchedule,
    x_t: &Tensor<T>,
    t: i64,
    t_next: i64,
    eps_hat: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t_next <= t {
        return Err(Error::InvalidArgument(format!("invert_step needs t_next > t, got {t_next} <= {t}")));
    }
    transfer(sched, x_t, t, t_next, eps_hat)
}

fn check_batch<T: Scalar>(x: &Tensor<T>, z_sem: &Tensor<T>) -> Result<()> {
    if x.rank() != 4 || z_sem.rank() != 2 || z_sem.dim(0) != x.dim(0) {
        return Err(shape_err!("sampler: images {:?} with codes {:?}", x.shape(), z_sem.shape()));
    }
    Ok(())
}

/// Runs the strided ladder from `x_T` down to the data endpoint.
pub fn sample<T: Scalar>(
    model: &impl EpsModel<T>,
    z_sem: &Tensor<T>,
    x_t: &Tensor<T>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_batch(x_t, z_sem)?;
    let ladder = cfg.ladder(sched)?;
    let mut x = x_t.clone();
    for i in (0..ladder.len()).rev() {
        let t = ladder[i];
        let t_prev = if i == 0 { -1 } else { ladder[i - 1] as i64 };
        let eps = model.eps(&x, t, z_sem)?;
        x.expect_same_shape(&eps)?;
        x = ddim_step(sched, &x, t as i64, t_prev, &eps)?;
    }
    Ok(x)
}

/// Ascends the same ladder from `x0`, returning the inferred `x_T`. Noise is
/// predicted at the current (lower) timestep; at the data endpoint that is
/// timestep 0, the closest the model has been trained on.
pub fn invert<T: Scalar>(
    model: &impl EpsModel<T>,
    x0: &Tensor<T>,
    z_sem: &Tensor<T>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_batch(x0, z_sem)?;
    let ladder = cfg.ladder(sched)?;
    let mut x = x0.clone();
    for i in 0..ladder.len() {
        let t = if i == 0 { -1 } else { ladder[i - 1] as i64 };
        let eps = model.eps(&x, t.max(0) as usize, z_sem)?;
        x.expect_same_shape(&eps)?;
        x = invert_step(sched, &x, t, ladder[i] as i64, &eps)?;
    }
    Ok(x)
}

/// Per-example timesteps and Gaussian noise for one loss evaluation.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn sample(rng: &mut Rng, shape: &[usize], sched: &NoiseSchedule) -> Result<Self> {
        if shape.first().copied().unwrap_or(0) == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let t = (0..shape[0]).map(|_| rng.below(sched.steps())).collect();
        Ok(Self { t, eps: rng.normal_tensor(shape) })
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with each example's own `t`.
    pub fn corrupt(&self, x0: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
        x0.expect_same_shape(&self.eps)?;
        let per = x0.numel() / self.t.len();
        let mut out = x0.clone();
        for (i, &t) in self.t.iter().enumerate() {
            let a = T::lit(sched.sqrt_alpha_bar()[t]);
            let s = T::lit(sched.sqrt_one_minus_alpha_bar()[t]);
            let range = i * per..(i + 1) * per;
            for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&self.eps.data()[range]) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }
}

/// Squared error summed over each example's elements, averaged over the batch.
pub fn noise_loss<T: Scalar>(g: &mut Graph<T>, eps_hat: Var, eps: &Tensor<T>) -> Result<Var> {
    let n = g.shape(eps_hat).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let target = g.constant(eps.clone());
    let diff = g.sub(eps_hat, target)?;
    let sq = g.sum_squares(diff);
    Ok(g.scale(sq, T::one() / T::lit(n as f64)))
}

/// The noise-prediction loss for a batch of clean images, conditioned on
/// `z_sem = encode(x0)`; gradients reach both networks.
pub fn l_simple<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &SemanticEncoder,
    denoiser: &Denoiser,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    draw: &NoiseDraw<T>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x0v = g.constant(x0.clone());
    let z = encoder.forward(g, params, x0v)?;
    l_simple_given_code(g, denoiser, params, x0, z, draw, sched)
}

/// As [`l_simple`] but with the semantic code already in the graph.
pub fn l_simple_given_code<T: Scalar>(
    g: &mut Graph<T>,
    denoiser: &Denoiser,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    z_sem: Var,
    draw: &NoiseDraw<T>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x_t = g.constant(draw.corrupt(x0, sched)?);
    let eps_hat = denoiser.forward(g, params, x_t, &draw.t, z_sem)?;
    noise_loss(g, eps_hat, &draw.eps)
}
