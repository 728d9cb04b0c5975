//! Procedural two-modality vessel phantoms.
//!
//! A [`VesselTree`] is pure geometry. [`render`] turns it into an image in one
//! of two appearances: domain A is bright with dark vessels, domain B is dark
//! with bright vessels. Both share one mask, so structure is identical across
//! domains and only appearance differs.

mod dataset;
mod pgm;

pub use dataset::{build_dataset, load_dataset, sample_seed, Dataset, DatasetManifest, SampleEntry, MANIFEST_FILE};
pub use pgm::{read_pgm, write_pgm};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Smallest supported image side.
pub const MIN_SIZE: usize = 16;
/// Deepest branching level; roots are depth 0.
pub const MAX_DEPTH: usize = 4;
/// Accepted range of mask foreground fraction.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.30);

const MAX_ATTEMPTS: usize = 64;
const JITTER: f64 = 35.0 * PI / 180.0;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: std::path::PathBuf, detail: String },
}

type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

/// One straight piece of vessel. Points are `(x, y)` in pixel-centre units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselTree {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

/// Vessel width at a branching depth: 3.0 at the root down to 1.0 at depth 4.
pub fn width_at(depth: usize) -> f64 {
    3.0 - 2.0 * depth.min(MAX_DEPTH) as f64 / MAX_DEPTH as f64
}

struct Grower<'a> {
    rng: &'a mut ChaCha8Rng,
    h: f64,
    w: f64,
    step: f64,
    segments: Vec<Segment>,
}

impl Grower<'_> {
    fn inside(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= self.w - 1.0 && p.1 <= self.h - 1.0
    }

    fn clip(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0.clamp(0.0, self.w - 1.0), p.1.clamp(0.0, self.h - 1.0))
    }

    /// Random walk of a few steps, each turning by up to a quarter of the
    /// jitter, spawning children that head off within ±35° of the parent.
    fn branch(&mut self, mut pos: (f64, f64), mut heading: f64, depth: usize) {
        let width = width_at(depth);
        let steps = self.rng.gen_range(3..=6) - depth.min(2);
        let step = self.step * (1.0 - 0.12 * depth as f64);
        for _ in 0..steps {
            heading += self.rng.gen_range(-JITTER..JITTER) * 0.25;
            let raw = (pos.0 + step * heading.cos(), pos.1 + step * heading.sin());
            let end = self.clip(raw);
            self.segments.push(Segment {
                start: pos,
                end,
                width,
            });
            if !self.inside(raw) {
                return;
            }
            pos = end;
            if depth < MAX_DEPTH && self.rng.gen_bool(0.3) {
                let side = if self.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let child = heading + side * self.rng.gen_range(0.3 * JITTER..JITTER);
                self.branch(pos, child, depth + 1);
            }
        }
    }
}

fn grow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Segment> {
    let (hf, wf) = (h as f64, w as f64);
    let mut g = Grower {
        rng,
        h: hf,
        w: wf,
        step: hf.min(wf) / 6.0,
        segments: Vec::new(),
    };
    let roots = g.rng.gen_range(1..=3);
    for _ in 0..roots {
        // Start on a random edge and head roughly towards the centre.
        let t = g.rng.gen::<f64>();
        let start = match g.rng.gen_range(0..4) {
            0 => (t * (wf - 1.0), 0.0),
            1 => (t * (wf - 1.0), hf - 1.0),
            2 => (0.0, t * (hf - 1.0)),
            _ => (wf - 1.0, t * (hf - 1.0)),
        };
        let centre = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
        let heading = (centre.1 - start.1).atan2(centre.0 - start.0) + g.rng.gen_range(-JITTER..JITTER);
        g.branch(start, heading, 0);
    }
    g.segments
}

/// Deterministic branching tree whose rasterised mask covers between 2% and
/// 30% of the image. Draws that fall outside are rejected and redrawn; after
/// repeated failures a single straight root vessel is used.
pub fn generate_tree(seed: u64, height: usize, width: usize) -> Result<VesselTree> {
    if height < MIN_SIZE || width < MIN_SIZE {
        return Err(PhantomError::Argument(format!(
            "phantom size {height}x{width} below {MIN_SIZE}x{MIN_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let tree = VesselTree {
            height,
            width,
            segments: grow(&mut rng, height, width),
        };
        let frac = foreground_fraction(&tree);
        if frac >= FOREGROUND_RANGE.0 && frac <= FOREGROUND_RANGE.1 {
            return Ok(tree);
        }
    }
    let y = (height as f64 - 1.0) / 2.0;
    Ok(VesselTree {
        height,
        width,
        segments: vec![Segment {
            start: (0.0, y),
            end: (width as f64 - 1.0, y),
            width: width_at(0),
        }],
    })
}

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.end.0 - s.start.0, s.end.1 - s.start.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.start.0) * dx + (p.1 - s.start.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.start.0 + t * dx, s.start.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Per-pixel stroke coverage in `[0, 1]` from 4×4 supersampling of the
/// union of all segment capsules.
pub fn coverage(tree: &VesselTree) -> Vec<f64> {
    let (h, w) = (tree.height, tree.width);
    let mut cov = vec![0.0; h * w];
    let n = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let near: Vec<&Segment> = tree
                .segments
                .iter()
                .filter(|s| {
                    let r = s.width / 2.0 + 1.0;
                    let (x, y) = (x as f64, y as f64);
                    x + r >= s.start.0.min(s.end.0)
                        && x - r <= s.start.0.max(s.end.0)
                        && y + r >= s.start.1.min(s.end.1)
                        && y - r <= s.start.1.max(s.end.1)
                })
                .collect();
            if near.is_empty() {
                continue;
            }
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = (
                        x as f64 + (sx as f64 + 0.5) / n - 0.5,
                        y as f64 + (sy as f64 + 0.5) / n - 0.5,
                    );
                    if near.iter().any(|s| segment_distance(p, s) <= s.width / 2.0) {
                        hits += 1;
                    }
                }
            }
            cov[y * w + x] = hits as f64 / (n * n);
        }
    }
    cov
}

/// Binary vessel mask: coverage of at least one half.
pub fn rasterize_mask(tree: &VesselTree) -> Tensor {
    let cov = coverage(tree);
    Tensor::new(&[1, 1, tree.height, tree.width], cov.iter().map(|&c| f64::from(c >= 0.5)).collect())
        .expect("mask size")
}

pub fn foreground_fraction(tree: &VesselTree) -> f64 {
    rasterize_mask(tree).mean()
}

/// Rendered image with its mask, both `[1, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub domain: Domain,
    pub seed: u64,
}

/// Appearance knobs; `clean` removes illumination falloff, noise, speckle
/// and banding, leaving only the two base intensities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderOptions {
    pub clean: bool,
}

/// Background and vessel intensity of a domain.
pub fn base_intensities(domain: Domain) -> (f64, f64) {
    match domain {
        Domain::A => (0.8, 0.25),
        Domain::B => (0.12, 0.85),
    }
}

pub fn render(tree: &VesselTree, domain: Domain, seed: u64) -> PhantomSample {
    render_with(tree, domain, seed, RenderOptions::default())
}

/// Domain A: bright background with radial illumination falloff, dark
/// vessels, additive Gaussian noise σ=0.03. Domain B: dark background,
/// bright vessels, multiplicative speckle in [0.7, 1.3] and horizontal
/// banding of amplitude 0.05. Both are clipped to `[0, 1]`.
pub fn render_with(tree: &VesselTree, domain: Domain, seed: u64, opts: RenderOptions) -> PhantomSample {
    let (h, w) = (tree.height, tree.width);
    let cov = coverage(tree);
    let (bg, vessel) = base_intensities(domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let phase = rng.gen_range(0.0..2.0 * PI);
    let period = rng.gen_range(5.0..9.0);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let rmax2 = cy * cy + cx * cx;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let c = cov[y * w + x];
            let v = if opts.clean {
                bg * (1.0 - c) + vessel * c
            } else {
                match domain {
                    Domain::A => {
                        let r2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / rmax2;
                        let lit = bg * (1.0 - 0.25 * r2);
                        lit * (1.0 - c) + vessel * c + noise.sample(&mut rng)
                    }
                    Domain::B => {
                        let speckle = rng.gen_range(0.7..1.3);
                        let band = 0.05 * (2.0 * PI * y as f64 / period + phase).sin();
                        (bg * (1.0 - c) + vessel * c) * speckle + band
                    }
                }
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    PhantomSample {
        image: Tensor::new(&[1, 1, h, w], data).expect("image size"),
        mask: Tensor::new(&[1, 1, h, w], cov.iter().map(|&c| f64::from(c >= 0.5)).collect()).expect("mask size"),
        domain,
        seed,
    }
}
