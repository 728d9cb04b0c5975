//! Variance schedules and the timestep subsequences used by DDIM traversal.
//!
//! Timesteps are 1-based: `t ∈ {1..T}`, with `t = 0` denoting the clean
//! image and `ᾱ_0 ≡ 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Argument(String),
    #[error("timestep {t} outside 0..={steps}")]
    Timestep { t: usize, steps: usize },
}

/// Per-step variances `β_t`, cumulative signal coefficients `ᾱ_t`, and
/// reverse-process noise scales `σ_t` (with `σ_t² = β_t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Serialized form: the schedule is rebuilt from its defining parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl TryFrom<ScheduleSpec> for NoiseSchedule {
    type Error = ScheduleError;

    fn try_from(spec: ScheduleSpec) -> Result<Self, Self::Error> {
        linear_schedule(spec.steps, spec.beta_start, spec.beta_end)
    }
}

impl From<NoiseSchedule> for ScheduleSpec {
    fn from(s: NoiseSchedule) -> Self {
        s.spec()
    }
}

/// Linearly spaced `β` from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 1 {
        return Err(ScheduleError::Argument("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::Argument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut running = 1.0;
    for beta in &betas {
        running *= 1.0 - beta;
        alpha_bars.push(running);
    }
    let sigmas = betas.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        betas,
        alpha_bars,
        sigmas,
    })
}

/// The standard `1e-4 → 0.02` linear schedule with both endpoints scaled by
/// `1000 / T`, so shorter chains reach a comparable terminal `ᾱ_T`.
pub fn scaled_linear_schedule(steps: usize) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 1 {
        return Err(ScheduleError::Argument("step count must be at least 1".into()));
    }
    let scale = 1000.0 / steps as f64;
    linear_schedule(steps, 1e-4 * scale, 0.02 * scale)
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<(), ScheduleError> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            Err(ScheduleError::Timestep {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t, false)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t, true)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn sigma(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t, false)?;
        Ok(self.sigmas[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Uniformly strided timesteps `τ_i = round(i·T/S)`, `i = 1..S`.
///
/// Position 0 of the subsequence is the clean image (`t = 0`); position `i`
/// is timestep `τ_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdimSubsequence {
    steps: Vec<usize>,
}

pub fn ddim_subsequence(total: usize, len: usize) -> Result<DdimSubsequence, ScheduleError> {
    if len < 1 || len > total {
        return Err(ScheduleError::Argument(format!(
            "subsequence length {len} must lie in 1..={total}"
        )));
    }
    // round-half-up of i*T/S in integer arithmetic
    let steps = (1..=len)
        .map(|i| (2 * i * total + len) / (2 * len))
        .collect();
    Ok(DdimSubsequence { steps })
}

impl DdimSubsequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Timestep at subsequence position `pos` (position 0 is `t = 0`).
    pub fn timestep(&self, pos: usize) -> Option<usize> {
        match pos {
            0 => Some(0),
            p => self.steps.get(p - 1).copied(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_product() {
        let s = linear_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
        // endpoints scaled by 1000/T leave (0,1) for very short chains
        assert!(scaled_linear_schedule(20).is_err());
        assert!(scaled_linear_schedule(200).is_ok());
    }

    #[test]
    fn tiny_betas_keep_signal() {
        let s = linear_schedule(50, 1e-12, 1e-12).unwrap();
        assert!((s.alpha_bar(50).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn thousand_step_terminal_alpha_bar() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        // oracle: product evaluated through a log-sum
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expected = log_sum.exp();
        let got = s.alpha_bar(1000).unwrap();
        assert!((got - expected).abs() / expected < 1e-9);
        assert!((got - 4.0e-5).abs() < 0.1e-5, "{got}");
    }

    #[test]
    fn sigma_squared_is_beta() {
        let s = scaled_linear_schedule(200).unwrap();
        for t in 1..=200 {
            assert!((s.sigma(t).unwrap().powi(2) - s.beta(t).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn timestep_bounds() {
        let s = scaled_linear_schedule(200).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.alpha_bar(201).is_err());
        assert!(s.alpha_bar(200).is_ok());
    }

    #[test]
    fn subsequence_examples() {
        let seq = ddim_subsequence(1000, 50).unwrap();
        let expected: Vec<usize> = (1..=50).map(|i| 20 * i).collect();
        assert_eq!(seq.steps(), expected.as_slice());

        let full = ddim_subsequence(7, 7).unwrap();
        assert_eq!(full.steps(), &[1, 2, 3, 4, 5, 6, 7]);

        assert_eq!(ddim_subsequence(10, 3).unwrap().steps(), &[3, 7, 10]);
        assert!(ddim_subsequence(10, 11).is_err());
        assert!(ddim_subsequence(10, 0).is_err());
    }

    #[test]
    fn subsequence_positions() {
        let seq = ddim_subsequence(200, 20).unwrap();
        assert_eq!(seq.timestep(0), Some(0));
        assert_eq!(seq.timestep(6), Some(60));
        assert_eq!(seq.timestep(20), Some(200));
        assert_eq!(seq.timestep(21), None);
    }

    #[test]
    fn serde_rebuilds_identical_schedule() {
        let s = scaled_linear_schedule(200).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }
}
