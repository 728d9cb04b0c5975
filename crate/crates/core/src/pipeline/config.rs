use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::losses::VesselWeightConfig;
use crate::schedule::{ddim_subsequence, scaled_linear_schedule, DdimSubsequence, NoiseSchedule};

/// Every knob of a pipeline run. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    /// DDIM subsequence length `S`.
    pub ddim_steps: usize,
    /// Inversion depth in subsequence positions.
    pub t0: usize,
    /// Co-optimization iterations `K`.
    pub iterations: usize,
    pub lr_gen: f64,
    pub lr_seg: f64,
    /// Decoupled weight decay of the generator optimizer (AdamW).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_pretrain_a: usize,
    pub epochs_pretrain_b: usize,
    pub epochs_segmenter: usize,
    pub epochs_gen_finetune: usize,
    pub epochs_seg_finetune: usize,
    pub pseudo_label_threshold: f64,
    pub vessel_weight: VesselWeightConfig,
    /// Ancestral (DDPM) instead of deterministic DDIM steps for Iter-0
    /// synthesis.
    pub stochastic_synthesis: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 200,
            ddim_steps: 20,
            t0: 6,
            iterations: 3,
            lr_gen: 1e-4,
            lr_seg: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs_pretrain_a: 40,
            epochs_pretrain_b: 40,
            epochs_segmenter: 20,
            epochs_gen_finetune: 10,
            epochs_seg_finetune: 10,
            pseudo_label_threshold: 0.5,
            vessel_weight: VesselWeightConfig::default(),
            stochastic_synthesis: false,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.ddim_steps > self.diffusion_steps {
            return bad(format!(
                "ddim_steps {} exceeds diffusion_steps {}",
                self.ddim_steps, self.diffusion_steps
            ));
        }
        if self.t0 > self.ddim_steps {
            return bad(format!("t0 {} exceeds ddim_steps {}", self.t0, self.ddim_steps));
        }
        if self.ddim_steps == 0 {
            return bad("ddim_steps must be at least 1".into());
        }
        if !(self.lr_gen > 0.0 && self.lr_gen.is_finite()) || !(self.lr_seg > 0.0 && self.lr_seg.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            return bad(format!("weight_decay {} outside [0, 1]", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.pseudo_label_threshold) || self.pseudo_label_threshold == 0.0 {
            return bad(format!("pseudo_label_threshold {} outside (0, 1)", self.pseudo_label_threshold));
        }
        if !self.vessel_weight.lambda.is_finite() || self.vessel_weight.lambda < 0.0 {
            return bad("vessel_weight.lambda must be finite and ≥ 0".into());
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        Ok(scaled_linear_schedule(self.diffusion_steps)?)
    }

    pub fn subsequence(&self) -> Result<DdimSubsequence, PipelineError> {
        Ok(ddim_subsequence(self.diffusion_steps, self.ddim_steps)?)
    }
}
