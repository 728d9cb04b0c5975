//! Tiny encoder–decoder networks: the timestep-conditioned noise predictor
//! and the vessel segmenter.
//!
//! Both share a three-level backbone (widths 16/32/64) with 2×2 stride-2
//! downsampling, nearest-neighbour upsampling followed by a 3×3 convolution,
//! channel-concatenated skips, and `1/√2`-scaled residual blocks. There are
//! no normalisation layers.

mod backbone;
mod denoiser;
mod params;
mod segmenter;

pub use backbone::WIDTHS;
pub use denoiser::{sinusoidal_features, Denoiser, TimestepEmbedding, TIME_EMBED_DIM};
pub use params::{Bound, ParamInfo, ParamSet};
pub use segmenter::Segmenter;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
}

fn check_spatial(h: usize, w: usize) -> Result<(), NetError> {
    if !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(NetError::Dimension(format!(
            "spatial size {h}x{w} must be divisible by 4"
        )));
    }
    Ok(())
}

fn check_layout(template: &ParamSet, params: &ParamSet) -> Result<(), NetError> {
    let (want, got) = (template.infos(), params.infos());
    if want != got {
        let detail = want
            .iter()
            .zip(&got)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("expected {} parameters, found {}", want.len(), got.len()));
        return Err(NetError::Config(format!("parameter layout mismatch: {detail}")));
    }
    Ok(())
}
