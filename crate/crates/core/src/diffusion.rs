//! Diffusion-process arithmetic: forward corruption, the learned reverse
//! step, and deterministic DDIM reverse and inversion steps.
//!
//! Every function takes the noise estimate from the caller, so nothing here
//! depends on a network.

use thiserror::Error;

use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("step order: {0}")]
    Order(String),
}

type Result<T> = std::result::Result<T, DiffusionError>;

/// An image batch at a point of a diffusion trajectory (`t = 0` is clean).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor,
    pub t: usize,
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    Ok(x.zip_map(y, |u, v| a * u + b * v)?)
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_marginal(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(ScheduleError::Timestep { t, steps: sched.steps() }.into());
    }
    let ab = sched.alpha_bar(t)?;
    axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// One Markov corruption step `√(1−β_t)·x_{t−1} + √β_t·noise`.
pub fn forward_step(x_prev: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let beta = sched.beta(t)?;
    axpby((1.0 - beta).sqrt(), x_prev, beta.sqrt(), noise)
}

/// Mean of the learned reverse transition,
/// `(x_t − β_t/√(1−ᾱ_t)·ε̂) / √(1−β_t)`.
pub fn posterior_mean(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    posterior_mean_with(x_t, sched.beta(t)?, sched.alpha_bar(t)?, eps_pred)
}

fn posterior_mean_with(x_t: &Tensor, beta: f64, alpha_bar: f64, eps_pred: &Tensor) -> Result<Tensor> {
    let inv = 1.0 / (1.0 - beta).sqrt();
    axpby(inv, x_t, -inv * beta / (1.0 - alpha_bar).sqrt(), eps_pred)
}

/// Ancestral sampling step: posterior mean plus `σ_t·noise`, with no noise
/// added at `t = 1`.
pub fn ddpm_sample_step(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, t, eps_pred, sched)?;
    if t == 1 {
        // still validate the noise shape
        if noise.shape() != x_t.shape() {
            return Err(TensorError::Shape {
                op: "ddpm_sample_step",
                detail: format!("noise {:?} vs {:?}", noise.shape(), x_t.shape()),
            }
            .into());
        }
        return Ok(mean);
    }
    axpby(1.0, &mean, sched.sigma(t)?, noise)
}

/// Clean-image estimate `(x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    axpby(inv, x_t, -inv * (1.0 - ab).sqrt(), eps_pred)
}

fn ddim_transfer(
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x0 = predict_x0(x_t, t_from, eps_pred, sched)?;
    let ab = sched.alpha_bar(t_to)?;
    axpby(ab.sqrt(), &x0, (1.0 - ab).sqrt(), eps_pred)
}

/// Deterministic DDIM step towards the data (`t_to < t_from`).
pub fn ddim_reverse_step(
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_to >= t_from {
        return Err(DiffusionError::Order(format!(
            "reverse step needs t_to < t_from, got {t_from} -> {t_to}"
        )));
    }
    ddim_transfer(x_t, t_from, t_to, eps_pred, sched)
}

/// Deterministic DDIM inversion step towards the noise (`t_to > t_from`).
pub fn ddim_invert_step(
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_to <= t_from {
        return Err(DiffusionError::Order(format!(
            "inversion step needs t_to > t_from, got {t_from} -> {t_to}"
        )));
    }
    ddim_transfer(x_t, t_from, t_to, eps_pred, sched)
}
