use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_tree, read_pgm, render, write_pgm, Domain, PhantomError, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed derived from the global seed, the domain and the index.
pub fn sample_seed(global: u64, domain: Domain, index: usize) -> u64 {
    let tag = match domain {
        Domain::A => 0xA,
        Domain::B => 0xB,
    };
    mix(global ^ mix((tag << 40) ^ index as u64))
}

fn render_seed(sample: u64) -> u64 {
    mix(sample ^ 0x005E_ED0F_12E4_DE12)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Everything needed to regenerate or locate a dataset. Paths are relative
/// to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub size: usize,
    pub global_seed: u64,
    pub count_a: usize,
    pub count_b: usize,
    pub samples_a: Vec<SampleEntry>,
    /// Domain-B masks live under `eval_only/` and are never used for training.
    pub samples_b: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn new(count_a: usize, count_b: usize, size: usize, global_seed: u64) -> Self {
        let entries = |domain: Domain, count: usize| -> Vec<SampleEntry> {
            let (images, masks) = match domain {
                Domain::A => ("A/images", "A/masks"),
                Domain::B => ("B/images", "eval_only/B/masks"),
            };
            (0..count)
                .map(|i| SampleEntry {
                    index: i,
                    seed: sample_seed(global_seed, domain, i),
                    image: Path::new(images).join(format!("{i:04}.pgm")),
                    mask: Path::new(masks).join(format!("{i:04}.pgm")),
                })
                .collect()
        };
        Self {
            version: MANIFEST_VERSION,
            size,
            global_seed,
            count_a,
            count_b,
            samples_a: entries(Domain::A, count_a),
            samples_b: entries(Domain::B, count_b),
        }
    }
}

/// Renders every sample and writes images, masks and `manifest.json` under
/// `root`.
pub fn build_dataset(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PhantomError::Io { path, source }
    };
    fs::create_dir_all(root).map_err(io(root))?;
    for (domain, entries) in [(Domain::A, &manifest.samples_a), (Domain::B, &manifest.samples_b)] {
        for e in entries {
            let tree = generate_tree(e.seed, manifest.size, manifest.size)?;
            let s = render(&tree, domain, render_seed(e.seed));
            write_pgm(&root.join(&e.image), &s.image)?;
            write_pgm(&root.join(&e.mask), &s.mask)?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(io(&path))
}

/// Images and masks of a built dataset as `[1, 1, H, W]` tensors.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images_a: Vec<Tensor>,
    pub masks_a: Vec<Tensor>,
    pub images_b: Vec<Tensor>,
    /// Held out for evaluation only.
    pub eval_masks_b: Vec<Tensor>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| PhantomError::Io {
        path: path.clone(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| PhantomError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(PhantomError::Format {
            path,
            detail: format!("manifest version {} unsupported", manifest.version),
        });
    }
    let load = |entries: &[SampleEntry], mask: bool| -> Result<Vec<Tensor>> {
        entries
            .iter()
            .map(|e| {
                let t = read_pgm(&root.join(if mask { &e.mask } else { &e.image }))?;
                Ok(if mask { t.map(|v| f64::from(v >= 0.5)) } else { t })
            })
            .collect()
    };
    Ok(Dataset {
        images_a: load(&manifest.samples_a, false)?,
        masks_a: load(&manifest.samples_a, true)?,
        images_b: load(&manifest.samples_b, false)?,
        eval_masks_b: load(&manifest.samples_b, true)?,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn files_under(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn empty_dataset_writes_only_manifest() {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(dir.path(), &DatasetManifest::new(0, 0, 32, 1)).unwrap();
        assert_eq!(files_under(dir.path()), vec![dir.path().join(MANIFEST_FILE)]);
    }

    #[test]
    fn file_counts_layout_and_determinism() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = DatasetManifest::new(5, 4, 32, 42);
        build_dataset(a.path(), &m).unwrap();
        build_dataset(b.path(), &m).unwrap();
        let fa = files_under(a.path());
        assert_eq!(fa.len(), 2 * 5 + 2 * 4 + 1);
        assert_eq!(fs::read_dir(a.path().join("eval_only/B/masks")).unwrap().count(), 4);
        assert!(!a.path().join("B/masks").exists());
        for p in &fa {
            let rel = p.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(p).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
        let ds = load_dataset(a.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!((ds.images_a.len(), ds.eval_masks_b.len()), (5, 4));
        assert_eq!(ds.images_b[0].shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn seeds_are_distinct_across_domains_and_indices() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..500 {
            assert!(seen.insert(sample_seed(7, Domain::A, i)));
            assert!(seen.insert(sample_seed(7, Domain::B, i)));
        }
        assert_ne!(sample_seed(7, Domain::A, 0), sample_seed(8, Domain::A, 0));
    }
}
