use serde::{Deserialize, Serialize};

use super::LossError;
use crate::nets::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Adam / AdamW with bias-corrected moments. AdamW decays weights directly,
/// `p ← p·(1 − lr·wd)`, before the adaptive step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Adam, learning_rate, 0.0)
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::AdamW, learning_rate, weight_decay)
    }

    fn with_kind(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Moments are created lazily on the first call and
    /// must keep matching the parameter shapes afterwards.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), LossError> {
        if grads.len() != params.len() {
            return Err(LossError::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() {
                return Err(LossError::Training {
                    param: params.name(i).to_string(),
                    detail: format!("gradient shape {:?} vs parameter {:?}", g.shape(), params.get(i).shape()),
                });
            }
            if !g.all_finite() {
                return Err(LossError::Training {
                    param: params.name(i).to_string(),
                    detail: "non-finite gradient".into(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
            return Err(LossError::Argument("optimizer state does not match parameters".into()));
        }

        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = match self.kind {
            OptimizerKind::AdamW => 1.0 - self.learning_rate * self.weight_decay,
            OptimizerKind::Adam => 1.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g.data()[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g.data()[j] * g.data()[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] * decay - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
