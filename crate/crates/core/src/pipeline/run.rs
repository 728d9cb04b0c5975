//! Stage-by-stage execution against a run directory:
//!
//! ```text
//! ckpt/      eps_a, eps_b_k, seg_baseline, seg_k checkpoints
//! gen/       latents.ckpt, latents/ previews, iter0/ .. iterK/ graymaps
//! metrics/   loss traces, per-sample scores, summary.csv, history.csv
//! ```
//!
//! Stages exchange data only through these files, so running them one at a
//! time gives the same artifacts as running them all at once.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    batch, evaluate_segmenter, load_checkpoint, mine_latents, pooled_hist_distance, pretrain_source, pretrain_target,
    save_checkpoint, stage_rng, synthesize_target, to_model_range, train_segmenter, unbatch, Checkpoint,
    CheckpointError, CoData, IterationRecord, Model, PipelineConfig, PipelineError, SynthesisStart,
};
use crate::metrics::{scores_csv, SegmentationScores};
use crate::nets::{Denoiser, ParamSet, Segmenter};
use crate::phantom::{load_dataset, read_pgm, write_pgm, Dataset, PhantomError};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, PipelineError>;

/// Pipeline settings plus where the data lives and where outputs go.
///
/// Serialized flat: `dataset` and `out` sit next to the pipeline fields, and
/// any key that is neither is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub pipeline: PipelineConfig,
}

impl TryFrom<serde_json::Value> for RunConfig {
    type Error = PipelineError;

    fn try_from(value: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(mut map) = value else {
            return Err(PipelineError::Config("run configuration must be a JSON object".into()));
        };
        let mut path = |key: &str| match map.remove(key) {
            Some(serde_json::Value::String(s)) => Ok(PathBuf::from(s)),
            Some(other) => Err(PipelineError::Config(format!("{key} must be a string, got {other}"))),
            None => Err(PipelineError::Config(format!("missing field {key}"))),
        };
        let dataset = path("dataset")?;
        let out = path("out")?;
        let pipeline = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self { dataset, out, pipeline })
    }
}

impl From<RunConfig> for serde_json::Value {
    fn from(run: RunConfig) -> Self {
        let mut value = serde_json::to_value(&run.pipeline).expect("configuration serializes");
        let map = value.as_object_mut().expect("configuration is an object");
        map.insert("dataset".into(), run.dataset.to_string_lossy().into_owned().into());
        map.insert("out".into(), run.out.to_string_lossy().into_owned().into());
        value
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Self::try_from(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::Value::from(self.clone())).expect("configuration serializes")
    }

    /// Checks the pipeline settings and that the dataset manifest exists,
    /// before any stage touches the disk.
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        let manifest = self.dataset.join(crate::phantom::MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(PipelineError::MissingArtifact(manifest));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PretrainA,
    PretrainB,
    Mine,
    Translate,
    TrainSeg,
    Cooptimize,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::PretrainA,
        Stage::PretrainB,
        Stage::Mine,
        Stage::Translate,
        Stage::TrainSeg,
        Stage::Cooptimize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainA => "pretrain-a",
            Stage::PretrainB => "pretrain-b",
            Stage::Mine => "mine",
            Stage::Translate => "translate",
            Stage::TrainSeg => "train-seg",
            Stage::Cooptimize => "cooptimize",
        }
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

/// Paths of every artifact inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::MissingArtifact(path.to_path_buf())
        }
        other => other.into(),
    })
}

fn load_denoiser(path: &Path) -> Result<Denoiser> {
    match load(path)?.model {
        Model::Denoiser(d) => Ok(d),
        _ => Err(PipelineError::Contract(format!("{} does not hold a denoiser", path.display()))),
    }
}

fn load_segmenter(path: &Path) -> Result<Segmenter> {
    match load(path)?.model {
        Model::Segmenter(s) => Ok(s),
        _ => Err(PipelineError::Contract(format!("{} does not hold a segmenter", path.display()))),
    }
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("write to string");
    }
    s
}

fn summary_row(name: &str, s: &SegmentationScores, h: &crate::metrics::HistDistance) -> String {
    let auc = s.auc.map(|v| v.to_string()).unwrap_or_default();
    format!("{name},{},{auc},{},{},{},{}\n", s.dsc, s.acc, s.ahd, h.euclidean, h.cosine)
}

pub const SUMMARY_HEADER: &str = "model,dsc,auc,acc,ahd,hist_euclidean,hist_cosine\n";

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.ckpt"))
    }

    pub fn eps_a(&self) -> PathBuf {
        self.ckpt("eps_a")
    }

    pub fn eps_b(&self, k: usize) -> PathBuf {
        self.ckpt(&format!("eps_b_{k}"))
    }

    pub fn seg(&self, k: usize) -> PathBuf {
        self.ckpt(&format!("seg_{k}"))
    }

    pub fn seg_baseline(&self) -> PathBuf {
        self.ckpt("seg_baseline")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("gen/latents.ckpt")
    }

    pub fn latent_previews(&self) -> PathBuf {
        self.root.join("gen/latents")
    }

    pub fn generated(&self, k: usize) -> PathBuf {
        self.root.join(format!("gen/iter{k}"))
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join("metrics").join(file)
    }

    pub fn history(&self) -> PathBuf {
        self.metrics("history.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.metrics("summary.csv")
    }

    fn checkpoint(&self, model: Model, iteration: usize, cfg: &PipelineConfig, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            model,
            iteration,
            config: cfg.clone(),
            schedule: cfg.schedule()?,
        };
        Ok(save_checkpoint(&ckpt, path)?)
    }

    fn write_images(&self, dir: &Path, images: &[Tensor]) -> Result<()> {
        for (i, img) in images.iter().enumerate() {
            write_pgm(&dir.join(format!("{i:04}.pgm")), img)?;
        }
        Ok(())
    }

    fn read_images(&self, dir: &Path, count: usize) -> Result<Vec<Tensor>> {
        (0..count)
            .map(|i| {
                let path = dir.join(format!("{i:04}.pgm"));
                read_pgm(&path).map_err(|e| match e {
                    PhantomError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                        PipelineError::MissingArtifact(path.clone())
                    }
                    other => other.into(),
                })
            })
            .collect()
    }

    /// Runs one stage, reading its inputs from earlier stages' artifacts.
    pub fn run_stage(&self, stage: Stage, run: &RunConfig) -> Result<()> {
        let cfg = &run.pipeline;
        cfg.validate()?;
        let data = load_run_dataset(&run.dataset)?;
        log::info!("stage {} starting", stage.name());
        match stage {
            Stage::PretrainA => {
                let mut rng = stage_rng(cfg.seed, stage.name(), 0);
                let images: Vec<Tensor> = data.images_a.iter().map(to_model_range).collect();
                let (model, trace) = pretrain_source(cfg, &images, &data.masks_a, &mut rng)?;
                self.checkpoint(Model::Denoiser(model), 0, cfg, &self.eps_a())?;
                write_text(&self.metrics("pretrain_a_loss.csv"), &loss_csv(&trace))
            }
            Stage::PretrainB => {
                let mut rng = stage_rng(cfg.seed, stage.name(), 0);
                let images: Vec<Tensor> = data.images_b.iter().map(to_model_range).collect();
                let (model, trace) = pretrain_target(cfg, &images, &mut rng)?;
                self.checkpoint(Model::Denoiser(model), 0, cfg, &self.eps_b(0))?;
                write_text(&self.metrics("pretrain_b_loss.csv"), &loss_csv(&trace))
            }
            Stage::Mine => {
                let eps_a = load_denoiser(&self.eps_a())?;
                let mut latents = Vec::with_capacity(data.images_a.len());
                for (xs, ys) in data.images_a.chunks(cfg.batch_size).zip(data.masks_a.chunks(cfg.batch_size)) {
                    let x = to_model_range(&batch(&xs.iter().collect::<Vec<_>>())?);
                    let y = batch(&ys.iter().collect::<Vec<_>>())?;
                    latents.extend(unbatch(&mine_latents(&eps_a, &x, &y, cfg)?)?);
                }
                let mut set = ParamSet::new();
                for (i, l) in latents.iter().enumerate() {
                    set.push(format!("latent.{i:04}"), l.clone());
                }
                self.checkpoint(Model::Tensors(set), 0, cfg, &self.latents())?;
                let previews: Vec<Tensor> = latents.iter().map(super::to_image_range).collect();
                self.write_images(&self.latent_previews(), &previews)
            }
            Stage::Translate => {
                let eps_b = load_denoiser(&self.eps_b(0))?;
                let stored = load(&self.latents())?;
                if stored.config.t0 != cfg.t0 || stored.config.ddim_steps != cfg.ddim_steps {
                    return Err(PipelineError::Contract(format!(
                        "latents were mined at t0={} of S={}, configuration asks for t0={} of S={}",
                        stored.config.t0, stored.config.ddim_steps, cfg.t0, cfg.ddim_steps
                    )));
                }
                let Model::Tensors(set) = stored.model else {
                    return Err(PipelineError::Contract("latent file holds a network".into()));
                };
                let latents: Vec<Tensor> = set.iter().map(|(_, t)| t.clone()).collect();
                let mut rng = stage_rng(cfg.seed, stage.name(), 0);
                let mut images = Vec::with_capacity(latents.len());
                for xs in latents.chunks(cfg.batch_size) {
                    let x = batch(&xs.iter().collect::<Vec<_>>())?;
                    let start = SynthesisStart::Latent { x: &x, position: cfg.t0 };
                    images.extend(unbatch(&synthesize_target(&eps_b, start, None, cfg, &mut rng)?)?);
                }
                self.write_images(&self.generated(0), &images)
            }
            Stage::TrainSeg => {
                let generated = self.read_images(&self.generated(0), data.masks_a.len())?;
                let mut summary = String::from(SUMMARY_HEADER);
                let mut rng = stage_rng(cfg.seed, stage.name(), 0);
                let sources: [(&str, &[Tensor], PathBuf); 2] = [
                    ("baseline", &data.images_a, self.seg_baseline()),
                    ("iter0", &generated, self.seg(0)),
                ];
                for (name, images, path) in sources {
                    let mut seg = Segmenter::new(&mut rng);
                    let model_images: Vec<Tensor> = images.iter().map(to_model_range).collect();
                    let trace = train_segmenter(
                        &mut seg,
                        &model_images,
                        &data.masks_a,
                        cfg.epochs_segmenter,
                        cfg.lr_seg,
                        cfg.batch_size,
                        &mut rng,
                        name,
                    )?;
                    let (mean, per) = evaluate_segmenter(&seg, &data.images_b, &data.eval_masks_b, cfg.batch_size)?;
                    let hist = pooled_hist_distance(images, &data.images_b)?;
                    log::info!("{name}: held-out target dsc {:.4}", mean.dsc);
                    self.checkpoint(Model::Segmenter(seg), 0, cfg, &path)?;
                    write_text(&self.metrics(&format!("{name}_loss.csv")), &loss_csv(&trace.loss))?;
                    write_text(&self.metrics(&format!("{name}_scores.csv")), &per_sample_csv(&per, &mean))?;
                    summary.push_str(&summary_row(name, &mean, &hist));
                }
                write_text(&self.summary(), &summary)
            }
            Stage::Cooptimize => {
                let mut csv = format!("{}\n", IterationRecord::CSV_HEADER);
                write_text(&self.history(), &csv)?;
                if cfg.iterations == 0 {
                    return Ok(());
                }
                let generator = load_denoiser(&self.eps_b(0))?;
                let segmenter = load_segmenter(&self.seg(0))?;
                let co = CoData {
                    images_a: &data.images_a,
                    masks_a: &data.masks_a,
                    images_b: &data.images_b,
                    eval_masks_b: &data.eval_masks_b,
                };
                super::cooptimize(generator, segmenter, co, cfg, |out| {
                    let k = out.iteration;
                    self.checkpoint(Model::Denoiser(out.generator.clone()), k, cfg, &self.eps_b(k))?;
                    self.checkpoint(Model::Segmenter(out.segmenter.clone()), k, cfg, &self.seg(k))?;
                    self.write_images(&self.generated(k), &out.images)?;
                    csv.push_str(&out.record.csv_row());
                    csv.push('\n');
                    write_text(&self.history(), &csv)
                })?;
                Ok(())
            }
        }
    }

    /// Runs the given stages in order.
    pub fn run_stages(&self, stages: &[Stage], run: &RunConfig) -> Result<()> {
        for &stage in stages {
            self.run_stage(stage, run)?;
        }
        Ok(())
    }
}

fn per_sample_csv(per: &[SegmentationScores], mean: &SegmentationScores) -> String {
    let ids: Vec<String> = (0..per.len()).map(|i| format!("{i:04}")).collect();
    let rows = ids.iter().map(String::as_str).zip(per).chain([("mean", mean)]);
    scores_csv(rows)
}

fn load_run_dataset(root: &Path) -> Result<Dataset> {
    load_dataset(root).map_err(|e| match e {
        PhantomError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
            PipelineError::MissingArtifact(path)
        }
        other => other.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_parse_back() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("everything".parse::<Stage>().is_err());
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let ok = RunConfig::from_json(r#"{"dataset": "d", "out": "o", "iterations": 1}"#).unwrap();
        assert_eq!(ok.pipeline.iterations, 1);
        assert_eq!(ok.pipeline.t0, PipelineConfig::default().t0);
        assert_eq!(RunConfig::from_json(&ok.to_json()).unwrap(), ok);
        assert!(RunConfig::from_json(r#"{"dataset": "d", "out": "o", "extra": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dataset": "d", "out": "o", "pipeline": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"out": "o"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"dataset": "d", "out": "o", "seed": 3}"#).is_ok());
    }
}
