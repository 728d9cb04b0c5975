use serde::{Deserialize, Serialize};

use super::{
    batch, pseudo_labels, stage_rng, synthesize_target, to_model_range, train_denoiser, train_segmenter, unbatch,
    DenoiserData, PipelineConfig, PipelineError, SynthesisStart,
};
use crate::metrics::{histogram_of, hist_distance, mean_scores, score, HistDistance, SegmentationScores};
use crate::nets::{Denoiser, Segmenter};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, PipelineError>;

/// Held-out target scores and generated-vs-real histogram distances after
/// one co-optimization iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dsc: f64,
    pub auc: Option<f64>,
    pub acc: f64,
    pub ahd: f64,
    pub hist_euclidean: f64,
    pub hist_cosine: f64,
}

impl IterationRecord {
    pub fn new(iteration: usize, scores: SegmentationScores, hist: HistDistance) -> Self {
        Self {
            iteration,
            dsc: scores.dsc,
            auc: scores.auc,
            acc: scores.acc,
            ahd: scores.ahd,
            hist_euclidean: hist.euclidean,
            hist_cosine: hist.cosine,
        }
    }

    pub const CSV_HEADER: &'static str = "iteration,dsc,auc,acc,ahd,hist_euclidean,hist_cosine";

    pub fn csv_row(&self) -> String {
        let auc = self.auc.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{auc},{},{},{},{}",
            self.iteration, self.dsc, self.acc, self.ahd, self.hist_euclidean, self.hist_cosine
        )
    }
}

/// Everything produced by iteration `k` (1-based: the models are
/// `ε^B_k` and `S^B_k`).
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub iteration: usize,
    pub generator: Denoiser,
    pub segmenter: Segmenter,
    /// Synthesized target-style images in `[0, 1]`, one per source mask.
    pub images: Vec<Tensor>,
    pub record: IterationRecord,
}

/// Mean scores of a segmenter over images in `[0, 1]` with their masks, and
/// the per-image scores.
pub fn evaluate_segmenter(
    seg: &Segmenter,
    images: &[Tensor],
    masks: &[Tensor],
    batch_size: usize,
) -> Result<(SegmentationScores, Vec<SegmentationScores>)> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(PipelineError::Contract(format!(
            "evaluation needs matching nonempty sets, got {} images and {} masks",
            images.len(),
            masks.len()
        )));
    }
    let mut per = Vec::with_capacity(images.len());
    for (xs, ys) in images.chunks(batch_size.max(1)).zip(masks.chunks(batch_size.max(1))) {
        let x = to_model_range(&batch(&xs.iter().collect::<Vec<_>>())?);
        let probs = unbatch(&seg.probabilities(&x)?)?;
        for (p, y) in probs.iter().zip(ys) {
            per.push(score(p, &y.clone().reshape(p.shape())?).map_err(|e| PipelineError::Contract(e.to_string()))?);
        }
    }
    Ok((mean_scores(&per).expect("nonempty"), per))
}

/// Distances between the pooled intensity histograms of two image sets.
pub fn pooled_hist_distance(a: &[Tensor], b: &[Tensor]) -> Result<HistDistance> {
    let pool = |set: &[Tensor]| {
        let values: Vec<f64> = set.iter().flat_map(|t| t.data().iter().copied()).collect();
        histogram_of(&values).map_err(|e| PipelineError::Contract(e.to_string()))
    };
    Ok(hist_distance(&pool(a)?, &pool(b)?))
}

/// Source and target data for co-optimization, images in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct CoData<'a> {
    pub images_a: &'a [Tensor],
    pub masks_a: &'a [Tensor],
    pub images_b: &'a [Tensor],
    /// Used only to score each iteration.
    pub eval_masks_b: &'a [Tensor],
}

/// Runs `cfg.iterations` rounds of: pseudo-label the target images, fine-tune
/// the (conditional) generator on them with the vessel-weighted loss,
/// synthesize a labelled target-style set from the source masks, and
/// fine-tune the segmenter on it. `sink` sees every iteration's output.
pub fn cooptimize(
    generator: Denoiser,
    segmenter: Segmenter,
    data: CoData,
    cfg: &PipelineConfig,
    mut sink: impl FnMut(&IterationOutput) -> Result<()>,
) -> Result<(Denoiser, Segmenter, Vec<IterationRecord>)> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let (mut generator, mut segmenter) = (generator, segmenter);
    let mut history = Vec::with_capacity(cfg.iterations);
    let model_b: Vec<Tensor> = data.images_b.iter().map(to_model_range).collect();
    for k in 0..cfg.iterations {
        let iteration = k + 1;
        let round = || -> Result<IterationOutput> {
            let mut rng = stage_rng(cfg.seed, "cooptimize", iteration as u64);
            let mut labels = Vec::with_capacity(model_b.len());
            for xs in model_b.chunks(cfg.batch_size) {
                let x = batch(&xs.iter().collect::<Vec<_>>())?;
                labels.extend(unbatch(&pseudo_labels(&segmenter, &x, cfg.pseudo_label_threshold)?)?);
            }

            let mut gen = if generator.is_conditional() {
                generator.clone()
            } else {
                generator.conditionalize()?
            };
            let gen_data = DenoiserData {
                images: &model_b,
                conditions: Some(&labels),
                vessel_weight: Some(cfg.vessel_weight),
            };
            train_denoiser(
                &mut gen,
                &gen_data,
                cfg.epochs_gen_finetune,
                cfg.lr_gen,
                cfg.weight_decay,
                cfg.batch_size,
                &sched,
                &mut rng,
                "cooptimize-generator",
            )?;

            let mut images = Vec::with_capacity(data.masks_a.len());
            for ys in data.masks_a.chunks(cfg.batch_size) {
                let y = batch(&ys.iter().collect::<Vec<_>>())?;
                let [n, c, h, w] = y.dims4("synthesis")?;
                let out = synthesize_target(&gen, SynthesisStart::Noise { shape: [n, c, h, w] }, Some(&y), cfg, &mut rng)?;
                images.extend(unbatch(&out)?);
            }

            let mut seg = segmenter.clone();
            let model_syn: Vec<Tensor> = images.iter().map(to_model_range).collect();
            train_segmenter(
                &mut seg,
                &model_syn,
                data.masks_a,
                cfg.epochs_seg_finetune,
                cfg.lr_seg,
                cfg.batch_size,
                &mut rng,
                "cooptimize-segmenter",
            )?;

            let (scores, _) = evaluate_segmenter(&seg, data.images_b, data.eval_masks_b, cfg.batch_size)?;
            let hist = pooled_hist_distance(&images, data.images_b)?;
            let record = IterationRecord::new(iteration, scores, hist);
            log::info!("co-optimization iteration {iteration}: dsc {:.4}", record.dsc);
            Ok(IterationOutput {
                iteration,
                generator: gen,
                segmenter: seg,
                images,
                record,
            })
        };
        let out = round().map_err(|e| PipelineError::Iteration {
            iteration,
            source: Box::new(e),
        })?;
        sink(&out)?;
        history.push(out.record);
        generator = out.generator;
        segmenter = out.segmenter;
    }
    Ok((generator, segmenter, history))
}
