//! The three stages of the adaptation method and their on-disk orchestration:
//! pretraining the source and target denoisers, mining latents from source
//! images and synthesizing target-style images from them, and the iterative
//! co-optimization of generator and segmenter.
//!
//! Networks see images mapped from `[0, 1]` to `[-1, 1]`; masks stay in
//! `{0, 1}`, including when used as a conditioning channel.

mod checkpoint;
mod config;
mod cooptimize;
mod run;
mod synth;
mod train;

pub use checkpoint::{
    checkpoint_bytes, decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Model,
    FORMAT_VERSION,
};
pub use config::PipelineConfig;
pub use cooptimize::{cooptimize, evaluate_segmenter, pooled_hist_distance, CoData, IterationOutput, IterationRecord};
pub use run::{RunConfig, RunDir, Stage};
pub use synth::{mine_latents, pseudo_labels, synthesize_target, SynthesisStart};
pub use train::{
    denoiser_eval_loss, pretrain_source, pretrain_target, train_denoiser, train_segmenter, DenoiserData, SegmenterTrace,
};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::DiffusionError;
use crate::losses::LossError;
use crate::nets::NetError;
use crate::phantom::PhantomError;
use crate::schedule::ScheduleError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric abort in {stage} at step {step}: {detail}")]
    NumericAbort {
        stage: String,
        step: usize,
        detail: String,
    },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("co-optimization iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    /// True for errors caused by non-finite numbers during training or
    /// sampling.
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::NumericAbort { .. } => true,
            PipelineError::Iteration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

fn is_non_finite(e: &PipelineError) -> bool {
    matches!(
        e,
        PipelineError::Net(NetError::Tensor(TensorError::NonFinite { .. }))
            | PipelineError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
            | PipelineError::Loss(LossError::Training { .. })
            | PipelineError::Tensor(TensorError::NonFinite { .. })
    )
}

/// Rewrites non-finite failures as a [`PipelineError::NumericAbort`] tagged
/// with the stage and step.
fn at_step(stage: &str, step: usize) -> impl Fn(PipelineError) -> PipelineError + '_ {
    move |e| {
        if is_non_finite(&e) {
            PipelineError::NumericAbort {
                stage: stage.to_string(),
                step,
                detail: e.to_string(),
            }
        } else {
            e
        }
    }
}

/// `[0, 1]` image to network range `[-1, 1]`.
pub fn to_model_range(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Network range back to `[0, 1]`, clipping.
pub fn to_image_range(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Stacks `[1, 1, H, W]` items into `[N, 1, H, W]`.
fn batch(items: &[&Tensor]) -> Result<Tensor, PipelineError> {
    let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}

/// Splits `[N, ...]` into `N` items of shape `[1, ...]`.
fn unbatch(t: &Tensor) -> Result<Vec<Tensor>, PipelineError> {
    (0..t.shape()[0]).map(|i| Ok(t.batch_item(i)?)).collect()
}

/// Independent generator for one stage of a run, so stages can be rerun
/// alone and still match a full run.
pub fn stage_rng(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}
