use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{at_step, batch, PipelineConfig, PipelineError};
use crate::losses::{noise_loss, segmentation_loss, vessel_weighted_noise_loss, OptimizerState, VesselWeightConfig};
use crate::metrics::dsc;
use crate::nets::{Denoiser, Segmenter};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};

type Result<T> = std::result::Result<T, PipelineError>;

/// Training images in model range, optional per-image conditioning masks,
/// and whether those masks also weight the noise loss.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserData<'a> {
    pub images: &'a [Tensor],
    pub conditions: Option<&'a [Tensor]>,
    pub vessel_weight: Option<VesselWeightConfig>,
}

impl DenoiserData<'_> {
    fn check(&self, model: &Denoiser) -> Result<()> {
        match (self.conditions, model.is_conditional()) {
            (Some(c), true) if c.len() == self.images.len() => {}
            (Some(c), true) => {
                return Err(PipelineError::Contract(format!(
                    "{} conditions for {} images",
                    c.len(),
                    self.images.len()
                )))
            }
            (None, false) => {}
            _ => return Err(PipelineError::Contract("conditioning does not match the denoiser".into())),
        }
        if self.vessel_weight.is_some() && self.conditions.is_none() {
            return Err(PipelineError::Contract("vessel weighting needs masks".into()));
        }
        Ok(())
    }
}

/// Noisy inputs `x_t` for per-item timesteps.
fn corrupt(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let per = x0.numel() / ts.len();
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn denoiser_step(
    model: &Denoiser,
    data: &DenoiserData,
    idx: &[usize],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let x0 = batch(&idx.iter().map(|&i| &data.images[i]).collect::<Vec<_>>())?;
    let cond = data
        .conditions
        .map(|c| batch(&idx.iter().map(|&i| &c[i]).collect::<Vec<_>>()))
        .transpose()?;
    let ts: Vec<usize> = idx.iter().map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = corrupt(&x0, &ts, &eps, sched)?;

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, train);
    let xv = tape.constant(x_t);
    let cv = cond.clone().map(|c| tape.constant(c));
    let pred = model.forward(&mut tape, &bound, xv, &ts, cv)?;
    let target = tape.constant(eps);
    let loss = match (data.vessel_weight, &cond) {
        (Some(cfg), Some(mask)) => vessel_weighted_noise_loss(&mut tape, target, pred, mask, &cfg)?,
        _ => noise_loss(&mut tape, target, pred)?,
    };
    let value = tape.value(loss).item()?;
    if !train {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, Some(model.params().grads(&tape, &bound))))
}

/// Noise-prediction training with AdamW. Returns the mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    model: &mut Denoiser,
    data: &DenoiserData,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    stage: &str,
) -> Result<Vec<f64>> {
    data.check(model)?;
    if epochs > 0 && data.images.is_empty() {
        return Err(PipelineError::Contract(format!("{stage}: no training images")));
    }
    let mut opt = OptimizerState::adamw(lr, weight_decay);
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for idx in order.chunks(batch_size) {
            let mut run = || -> Result<f64> {
                let (loss, grads) = denoiser_step(model, data, idx, sched, rng, true)?;
                opt.step(model.params_mut(), &grads.expect("training step yields gradients"))?;
                Ok(loss)
            };
            let loss = run().map_err(at_step(stage, step))?;
            total += loss * idx.len() as f64;
            step += 1;
        }
        let mean = total / data.images.len() as f64;
        log::debug!("{stage}: epoch {epoch} loss {mean:.5}");
        trace.push(mean);
    }
    Ok(trace)
}

/// Mean noise loss over `data` with timesteps and noise drawn from `seed`,
/// so two models can be compared on identical corruptions.
pub fn denoiser_eval_loss(model: &Denoiser, data: &DenoiserData, batch_size: usize, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    data.check(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = (0..data.images.len()).collect();
    let mut total = 0.0;
    for idx in order.chunks(batch_size.max(1)) {
        total += denoiser_step(model, data, idx, sched, &mut rng, false)?.0 * idx.len() as f64;
    }
    Ok(total / data.images.len().max(1) as f64)
}

/// Conditional source denoiser `ε^A(x_t, t, y)` trained on paired images.
pub fn pretrain_source(
    cfg: &PipelineConfig,
    images: &[Tensor],
    masks: &[Tensor],
    rng: &mut ChaCha8Rng,
) -> Result<(Denoiser, Vec<f64>)> {
    let mut model = Denoiser::new(true, rng);
    let data = DenoiserData {
        images,
        conditions: Some(masks),
        vessel_weight: None,
    };
    let sched = cfg.schedule()?;
    let trace = train_denoiser(
        &mut model,
        &data,
        cfg.epochs_pretrain_a,
        cfg.lr_gen,
        cfg.weight_decay,
        cfg.batch_size,
        &sched,
        rng,
        "pretrain-a",
    )?;
    Ok((model, trace))
}

/// Unconditional target denoiser `ε^B(x_t, t)` trained on images alone.
pub fn pretrain_target(cfg: &PipelineConfig, images: &[Tensor], rng: &mut ChaCha8Rng) -> Result<(Denoiser, Vec<f64>)> {
    let mut model = Denoiser::new(false, rng);
    let data = DenoiserData {
        images,
        conditions: None,
        vessel_weight: None,
    };
    let sched = cfg.schedule()?;
    let trace = train_denoiser(
        &mut model,
        &data,
        cfg.epochs_pretrain_b,
        cfg.lr_gen,
        cfg.weight_decay,
        cfg.batch_size,
        &sched,
        rng,
        "pretrain-b",
    )?;
    Ok((model, trace))
}

/// Per-epoch training trace of a segmenter: mean loss and the DSC of the
/// thresholded predictions seen during the epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmenterTrace {
    pub loss: Vec<f64>,
    pub dsc: Vec<f64>,
}

/// Dice + cross-entropy training with Adam, warm-starting from `seg`.
/// Images are in model range, masks binary.
#[allow(clippy::too_many_arguments)]
pub fn train_segmenter(
    seg: &mut Segmenter,
    images: &[Tensor],
    masks: &[Tensor],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    stage: &str,
) -> Result<SegmenterTrace> {
    if images.len() != masks.len() {
        return Err(PipelineError::Contract(format!("{} images for {} masks", images.len(), masks.len())));
    }
    if epochs > 0 && images.is_empty() {
        return Err(PipelineError::Contract(format!("{stage}: no training pairs")));
    }
    let mut opt = OptimizerState::adam(lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = SegmenterTrace::default();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(rng);
        let (mut total, mut preds, mut gts) = (0.0, Vec::new(), Vec::new());
        for idx in order.chunks(batch_size) {
            let mut run = || -> Result<f64> {
                let x = batch(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
                let y = batch(&idx.iter().map(|&i| &masks[i]).collect::<Vec<_>>())?;
                let mut tape = Tape::new();
                let bound = seg.params().bind(&mut tape, true);
                let xv = tape.constant(x);
                let logits = seg.forward(&mut tape, &bound, xv)?;
                preds.extend(tape.value(logits).data().iter().map(|&l| f64::from(l >= 0.0)));
                gts.extend_from_slice(y.data());
                let loss = segmentation_loss(&mut tape, logits, &y)?;
                let value = tape.value(loss).item()?;
                tape.backward(loss)?;
                let grads = seg.params().grads(&tape, &bound);
                opt.step(seg.params_mut(), &grads)?;
                Ok(value)
            };
            total += run().map_err(at_step(stage, step))? * idx.len() as f64;
            step += 1;
        }
        let n = preds.len();
        let d = dsc(&Tensor::new(&[n], preds)?, &Tensor::new(&[n], gts)?).expect("same length");
        let mean = total / images.len() as f64;
        log::debug!("{stage}: epoch {epoch} loss {mean:.4} train dsc {d:.4}");
        trace.loss.push(mean);
        trace.dsc.push(d);
    }
    Ok(trace)
}
