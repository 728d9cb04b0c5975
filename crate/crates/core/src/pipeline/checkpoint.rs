//! Checkpoint files: one line of JSON header, a newline, then every
//! parameter as little-endian `f64`, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::PipelineConfig;
use crate::nets::{Denoiser, ParamSet, Segmenter};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: format version {found}, expected {expected}", path.display())]
    Version { path: PathBuf, found: u64, expected: u32 },
    #[error("{}: truncated ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },
    #[error("{}: digest mismatch (header {expected}, content {actual})", path.display())]
    Digest {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{}: malformed checkpoint: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
}

/// What a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Denoiser(Denoiser),
    Segmenter(Segmenter),
    /// Named tensors without a network layout, such as mined latents.
    Tensors(ParamSet),
}

impl Model {
    fn kind(&self) -> &'static str {
        match self {
            Model::Denoiser(_) => "denoiser",
            Model::Segmenter(_) => "segmenter",
            Model::Tensors(_) => "tensors",
        }
    }

    fn params(&self) -> &ParamSet {
        match self {
            Model::Denoiser(d) => d.params(),
            Model::Segmenter(s) => s.params(),
            Model::Tensors(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: usize,
    pub config: PipelineConfig,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: String,
    in_channels: usize,
    iteration: usize,
    config: PipelineConfig,
    schedule: ScheduleSpec,
    params: Vec<ParamEntry>,
    /// First 64 bits of the SHA-256 of the parameter blob, as hex.
    digest: String,
}

fn digest(blob: &[u8]) -> String {
    let d = Sha256::digest(blob);
    format!("{:016x}", u64::from_be_bytes(d[..8].try_into().expect("8 bytes")))
}

/// Serialises a checkpoint to bytes. The encoding is canonical, so equal
/// checkpoints give equal bytes.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let params = ckpt.model.params();
    let mut blob = Vec::with_capacity(params.count() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() / 8,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: ckpt.model.kind().to_string(),
        in_channels: match &ckpt.model {
            Model::Denoiser(d) => d.in_channels(),
            Model::Segmenter(_) => 1,
            Model::Tensors(_) => 0,
        },
        iteration: ckpt.iteration,
        config: ckpt.config.clone(),
        schedule: ckpt.schedule.spec(),
        params: entries,
        digest: digest(&blob),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    out.extend(blob);
    out
}

/// Parses bytes produced by [`checkpoint_bytes`]; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = path.to_path_buf();
    let format = |detail: String| CheckpointError::Format {
        path: path.clone(),
        detail,
    };
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CheckpointError::Truncated {
        path: path.clone(),
        detail: "no end of header".into(),
    })?;
    let (head, blob) = (&bytes[..newline], &bytes[newline + 1..]);
    // Read the version on its own first so that a newer header layout still
    // reports a version error rather than a parse error.
    let loose: serde_json::Value = serde_json::from_slice(head).map_err(|e| format(e.to_string()))?;
    let found = loose
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| format("missing format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::Version {
            path,
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(loose).map_err(|e| format(e.to_string()))?;
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() < total * 8 {
        return Err(CheckpointError::Truncated {
            path,
            detail: format!("blob has {} bytes, manifest needs {}", blob.len(), total * 8),
        });
    }
    if blob.len() > total * 8 {
        return Err(format(format!("{} trailing bytes", blob.len() - total * 8)));
    }
    let actual = digest(blob);
    if actual != header.digest {
        return Err(CheckpointError::Digest {
            path,
            expected: header.digest,
            actual,
        });
    }
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for p in &header.params {
        if p.offset != expected_offset {
            return Err(format(format!("parameter {} at offset {}, expected {expected_offset}", p.name, p.offset)));
        }
        let n: usize = p.shape.iter().product();
        let data = blob[p.offset * 8..(p.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&p.shape, data).map_err(|e| format(e.to_string()))?;
        params.push(p.name.clone(), t);
        expected_offset += n;
    }
    let model = match header.kind.as_str() {
        "denoiser" => Model::Denoiser(Denoiser::from_params(header.in_channels, params).map_err(|e| format(e.to_string()))?),
        "segmenter" => Model::Segmenter(Segmenter::from_params(params).map_err(|e| format(e.to_string()))?),
        "tensors" => Model::Tensors(params),
        other => return Err(format(format!("unknown model kind {other:?}"))),
    };
    let schedule = NoiseSchedule::try_from(header.schedule).map_err(|e| format(e.to_string()))?;
    Ok(Checkpoint {
        model,
        iteration: header.iteration,
        config: header.config,
        schedule,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, checkpoint_bytes(ckpt)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut net = Denoiser::new(true, &mut ChaCha8Rng::seed_from_u64(1));
        net.params_mut().tensors_mut()[0].data_mut()[0] = 0.1 + 0.2;
        let config = PipelineConfig {
            lr_gen: 3.3e-5,
            ..Default::default()
        };
        Checkpoint {
            model: Model::Denoiser(net),
            iteration: 2,
            schedule: config.schedule().unwrap(),
            config,
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = sample();
        save_checkpoint(&ckpt, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(back, ckpt);
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn segmenter_and_tensor_kinds_round_trip() {
        let seg = Segmenter::new(&mut ChaCha8Rng::seed_from_u64(2));
        let config = PipelineConfig::default();
        let mut latents = ParamSet::new();
        latents.push("latent.0000", Tensor::full(&[1, 1, 4, 4], -0.25));
        for model in [Model::Segmenter(seg), Model::Tensors(latents)] {
            let ckpt = Checkpoint {
                model,
                iteration: 0,
                schedule: config.schedule().unwrap(),
                config: config.clone(),
            };
            assert_eq!(decode_checkpoint(&checkpoint_bytes(&ckpt), Path::new("x")).unwrap(), ckpt);
        }
    }

    #[test]
    fn corruption_is_detected_with_distinct_errors() {
        let bytes = checkpoint_bytes(&sample());
        let p = Path::new("x");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped, p), Err(CheckpointError::Digest { .. })));

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 5], p), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..20], p), Err(CheckpointError::Truncated { .. })));

        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        let mut other = bumped.into_bytes();
        other.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(
            decode_checkpoint(&other, p),
            Err(CheckpointError::Version { found: 2, .. })
        ));
    }
}
