//! Diffusion noise schedule and the closed-form forward process.
//!
//! `alpha_bar[t]` is the cumulative product of `1 - beta[s]` for `s <= t`,
//! so the marginal is `x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps`.
//! Timesteps are 0-indexed; `t = 0` is the least-noised step.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the caches from an explicit beta sequence.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let rising = beta.windows(2).all(|w| w[1] >= w[0]);
        let falling = beta.windows(2).all(|w| w[1] <= w[0]);
        if !(rising || falling) {
            return Err(Error::InvalidArgument("betas must be monotone".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self { beta, alpha_bar, sqrt_alpha_bar, sqrt_one_minus_alpha_bar })
    }

    /// Betas evenly spaced from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bar(&self) -> &[f64] {
        &self.sqrt_alpha_bar
    }

    pub fn sqrt_one_minus_alpha_bar(&self) -> &[f64] {
        &self.sqrt_one_minus_alpha_bar
    }

    pub fn check_t(&self, t: i64) -> Result<usize> {
        if t < 0 || t as usize >= self.steps() {
            return Err(Error::Timestep { t, steps: self.steps() });
        }
        Ok(t as usize)
    }

    /// `alpha_bar` with the data endpoint `t = -1` mapped to 1.
    pub fn alpha_bar_at(&self, t: i64) -> Result<f64> {
        if t == -1 {
            return Ok(1.0);
        }
        self.check_t(t).map(|t| self.alpha_bar[t])
    }

    /// Closed-form marginal `q(x_t | x0)` evaluated at noise `eps`.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: i64, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let t = self.check_t(t)?;
        x0.expect_same_shape(eps)?;
        let a = T::lit(self.sqrt_alpha_bar[t]);
        let s = T::lit(self.sqrt_one_minus_alpha_bar[t]);
        x0.zip_map(eps, |x, e| a * x + s * e)
    }

    /// One Markov transition `q(x_t | x_{t-1})` evaluated at noise `eps`.
    pub fn forward_step<T: Scalar>(&self, x_prev: &Tensor<T>, t: i64, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let t = self.check_t(t)?;
        x_prev.expect_same_shape(eps)?;
        let a = T::lit((1.0 - self.beta[t]).sqrt());
        let s = T::lit(self.beta[t].sqrt());
        x_prev.zip_map(eps, |x, e| a * x + s * e)
    }

    /// Mean and (scalar) variance of the Bayes posterior `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_mean_var<T: Scalar>(
        &self,
        x_t: &Tensor<T>,
        x0: &Tensor<T>,
        t: i64,
    ) -> Result<(Tensor<T>, f64)> {
        let t = self.check_t(t)?;
        if t == 0 {
            return Err(Error::InvalidArgument("posterior needs t >= 1".into()));
        }
        x_t.expect_same_shape(x0).map_err(|_| shape_err!("posterior: x_t {:?} vs x0 {:?}", x_t.shape(), x0.shape()))?;
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let coef_xt = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let coef_x0 = ab_prev.sqrt() * b / (1.0 - ab);
        let var = (1.0 - ab_prev) * b / (1.0 - ab);
        let (cxt, cx0) = (T::lit(coef_xt), T::lit(coef_x0));
        Ok((x_t.zip_map(x0, |a, z| cxt * a + cx0 * z)?, var))
    }
}
