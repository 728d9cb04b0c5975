//! Training objectives recorded on a [`Tape`] and the Adam-family optimizers.
//!
//! Every loss takes tape handles and returns a scalar handle, so the same code
//! serves training (with `backward`) and evaluation (read the value).

mod optim;

pub use optim::{OptimizerKind, OptimizerState};

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("training error in parameter {param}: {detail}")]
    Training { param: String, detail: String },
}

type Result<T> = std::result::Result<T, LossError>;

/// Extra supervision on the noise prediction inside (dilated) vessel regions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VesselWeightConfig {
    pub lambda: f64,
    pub dilation_radius: usize,
}

impl Default for VesselWeightConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            dilation_radius: 1,
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    let (x, y) = (tape.value(a).shape(), tape.value(b).shape());
    if x != y {
        return Err(LossError::Tensor(TensorError::Shape {
            op: "loss",
            detail: format!("{op}: shapes {x:?} and {y:?} differ"),
        }));
    }
    Ok(())
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(LossError::Argument(format!("{what} must be binary")))
    }
}

/// Mean squared error between true and predicted noise.
pub fn noise_loss(tape: &mut Tape, eps_true: Var, eps_pred: Var) -> Result<Var> {
    same_shape(tape, eps_true, eps_pred, "noise_loss")?;
    let d = tape.sub(eps_pred, eps_true)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Square (Chebyshev) dilation of each `H×W` plane of a binary mask.
pub fn dilate(mask: &Tensor, radius: usize) -> Result<Tensor> {
    let [n, c, h, w] = mask.dims4("dilate")?;
    if radius == 0 {
        return Ok(mask.clone());
    }
    let src = mask.data();
    let mut out = vec![0.0; src.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                if src[base + y * w + x] == 0.0 {
                    continue;
                }
                for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                    for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                        out[base + yy * w + xx] = 1.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(mask.shape(), out)?)
}

/// `noise_loss + λ · mean squared error over the dilated mask`. The second
/// term vanishes when the dilated mask is empty.
pub fn vessel_weighted_noise_loss(
    tape: &mut Tape,
    eps_true: Var,
    eps_pred: Var,
    mask: &Tensor,
    cfg: &VesselWeightConfig,
) -> Result<Var> {
    if !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(LossError::Argument(format!("lambda must be finite and ≥ 0, got {}", cfg.lambda)));
    }
    same_shape(tape, eps_true, eps_pred, "vessel_weighted_noise_loss")?;
    if mask.shape() != tape.value(eps_true).shape() {
        return Err(LossError::Tensor(TensorError::Shape {
            op: "vessel_weighted_noise_loss",
            detail: format!("mask {:?} vs noise {:?}", mask.shape(), tape.value(eps_true).shape()),
        }));
    }
    check_binary(mask, "vessel mask")?;
    let base = noise_loss(tape, eps_true, eps_pred)?;
    let region = dilate(mask, cfg.dilation_radius)?;
    let count = region.sum();
    if count == 0.0 || cfg.lambda == 0.0 {
        return Ok(base);
    }
    let d = tape.sub(eps_pred, eps_true)?;
    let sq = tape.mul(d, d)?;
    let m = tape.constant(region);
    let masked = tape.mul(sq, m)?;
    let total = tape.sum(masked)?;
    let extra = tape.scale(total, cfg.lambda / count)?;
    Ok(tape.add(base, extra)?)
}

/// `1 − (2Σpg + smooth) / (Σp + Σg + smooth)` over the whole batch.
pub fn dice_loss(tape: &mut Tape, probs: Var, target: Var, smooth: f64) -> Result<Var> {
    same_shape(tape, probs, target, "dice_loss")?;
    let pg = tape.mul(probs, target)?;
    let inter = tape.sum(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, smooth)?;
    let sp = tape.sum(probs)?;
    let sg = tape.sum(target)?;
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, smooth)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(tape: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    same_shape(tape, probs, target, "bce_loss")?;
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.ln(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.ln(q)?;
    let g_neg = tape.scale(target, -1.0)?;
    let one_minus_g = tape.add_scalar(g_neg, 1.0)?;
    let a = tape.mul(target, log_p)?;
    let b = tape.mul(one_minus_g, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Equal-weight Dice (smooth 1) plus cross-entropy on `sigmoid(logits)`.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_binary(target, "segmentation target")?;
    let probs = tape.sigmoid(logits)?;
    let g = tape.constant(target.clone());
    let dice = dice_loss(tape, probs, g, 1.0)?;
    let bce = bce_loss(tape, probs, g)?;
    Ok(tape.add(dice, bce)?)
}
