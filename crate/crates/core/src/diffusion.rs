//! Forward noising and reverse steps for ε-prediction diffusion.
//!
//! Timesteps are zero-based: `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε` for `t ∈ [0, T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps).map(|i| beta_start + step * i as f64).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Config(format!("{op}: timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `steps` evenly spaced timesteps in descending order, ending at the
    /// smallest and starting at `T − 1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Config(format!("sampler steps must be in [1, {}], got {steps}", self.len())));
        }
        let t = self.len();
        Ok((0..steps).rev().map(|i| (i + 1) * t / steps - 1).collect())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("q_sample", x0, eps)?;
    sched.check_t("q_sample", t)?;
    let ab = sched.alpha_bars[t];
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-sample estimate implied by an ε prediction.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("predict_x0", x_t, eps_hat)?;
    sched.check_t("predict_x0", t)?;
    let ab = sched.alpha_bars[t];
    x_t.axpby(1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt())
}

/// Ancestral step `x_t → x_{t−1}`. The `t = 1` step returns the posterior
/// mean without added noise.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    same_shape("ddpm_step", x_t, eps_hat)?;
    if t == 0 || t >= sched.len() {
        return Err(Error::Config(format!("ddpm_step: need 1 <= t < {}, got {t}", sched.len())));
    }
    let (beta, alpha, ab) = (sched.betas[t], sched.alphas[t], sched.alpha_bars[t]);
    let mean = x_t.axpby(1.0 / alpha.sqrt(), eps_hat, -beta / ((1.0 - ab).sqrt() * alpha.sqrt()))?;
    if t == 1 {
        return Ok(mean);
    }
    let var = (1.0 - sched.alpha_bars[t - 1]) / (1.0 - ab) * beta;
    let sigma = var.sqrt();
    let mut out = mean;
    for v in out.data_mut() {
        *v += sigma * rng.normal();
    }
    Ok(out)
}

/// Deterministic (η = 0) step `x_t → x_{t_prev}`; `None` steps to the clean
/// sample estimate.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let Some(tp) = t_prev else { return Ok(x0) };
    if tp >= t {
        return Err(Error::Config(format!("ddim_step: t_prev {tp} must be below t {t}")));
    }
    let ab_prev = sched.alpha_bars[tp];
    x0.axpby(ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt())
}
