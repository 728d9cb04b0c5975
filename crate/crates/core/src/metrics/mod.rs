//! Segmentation scores (DSC, AUC, ACC, AHD) and intensity-histogram
//! distances.
//!
//! Masks are tensors of zeros and ones; anything nonzero counts as
//! foreground. Distances are in pixels.

mod edt;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use edt::squared_distance_to;

/// Number of bins in an [`IntensityHistogram`].
pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
}

type Result<T> = std::result::Result<T, MetricError>;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn fg(v: f64) -> bool {
    v != 0.0
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dsc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "dsc")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(fg(p) && fg(g));
        total += usize::from(fg(p)) + usize::from(fg(g));
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Fraction of pixels where the masks agree.
pub fn acc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "acc")?;
    let agree = pred.data().iter().zip(gt.data()).filter(|(&p, &g)| fg(p) == fg(g)).count();
    Ok(agree as f64 / pred.numel() as f64)
}

/// Mann–Whitney AUC from rank sums, ties counted one half.
pub fn auc(scores: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(scores, gt, "auc")?;
    let s = scores.data();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let n_pos = gt.data().iter().filter(|&&g| fg(g)).count();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("auc needs both classes in the ground truth".into()));
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && s[order[j]] == s[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += rank * order[i..j].iter().filter(|&&k| fg(gt.data()[k])).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn plane(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().any(|&d| d != 1) {
        return Err(MetricError::Shape(format!("{op} expects a single H×W plane, got {shape:?}")));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Average Hausdorff distance between foreground pixel sets. Both empty
/// gives 0; exactly one empty gives the image diagonal.
pub fn ahd(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "ahd")?;
    let (h, w) = plane(pred, "ahd")?;
    let p: Vec<bool> = pred.data().iter().map(|&v| fg(v)).collect();
    let g: Vec<bool> = gt.data().iter().map(|&v| fg(v)).collect();
    let (np, ng) = (p.iter().filter(|&&b| b).count(), g.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let mean_to = |from: &[bool], to: &[bool], n: usize| {
        let d2 = squared_distance_to(to, h, w);
        from.iter().zip(&d2).filter(|(&f, _)| f).map(|(_, &d)| d.sqrt()).sum::<f64>() / n as f64
    };
    Ok(0.5 * (mean_to(&p, &g, np) + mean_to(&g, &p, ng)))
}

/// Per-image segmentation scores. `auc` is `None` when the ground truth has
/// a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub dsc: f64,
    pub auc: Option<f64>,
    pub acc: f64,
    pub ahd: f64,
}

/// Scores a probability map against a binary mask, thresholding at 0.5.
pub fn score(probs: &Tensor, gt: &Tensor) -> Result<SegmentationScores> {
    let pred = probs.map(|p| f64::from(p >= 0.5));
    Ok(SegmentationScores {
        dsc: dsc(&pred, gt)?,
        auc: match auc(probs, gt) {
            Ok(v) => Some(v),
            Err(MetricError::Undefined(_)) => None,
            Err(e) => return Err(e),
        },
        acc: acc(&pred, gt)?,
        ahd: ahd(&pred, gt)?,
    })
}

/// Field-wise mean; AUC averages over the samples where it is defined.
pub fn mean_scores(all: &[SegmentationScores]) -> Option<SegmentationScores> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let aucs: Vec<f64> = all.iter().filter_map(|s| s.auc).collect();
    Some(SegmentationScores {
        dsc: all.iter().map(|s| s.dsc).sum::<f64>() / n,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        acc: all.iter().map(|s| s.acc).sum::<f64>() / n,
        ahd: all.iter().map(|s| s.ahd).sum::<f64>() / n,
    })
}

/// `sample_id,dsc,auc,acc,ahd` rows; an undefined AUC is left blank.
pub fn scores_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a SegmentationScores)>) -> String {
    let mut out = String::from("sample_id,dsc,auc,acc,ahd\n");
    for (id, s) in rows {
        let auc = s.auc.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{id},{},{auc},{},{}", s.dsc, s.acc, s.ahd).expect("write to string");
    }
    out
}

/// Normalised 256-bin intensity histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityHistogram {
    bins: Vec<f64>,
}

impl IntensityHistogram {
    pub fn bins(&self) -> &[f64] {
        &self.bins
    }
}

/// Equal-width bins, the last one closed on the right. Values outside
/// `[0, 1]` are clamped into the end bins.
pub fn histogram(image: &Tensor) -> IntensityHistogram {
    histogram_of(image.data()).expect("tensors are never empty")
}

/// [`histogram`] over raw values; errors on an empty slice.
pub fn histogram_of(values: &[f64]) -> Result<IntensityHistogram> {
    if values.is_empty() {
        return Err(MetricError::Undefined("histogram of an empty image".into()));
    }
    let mut bins = vec![0.0; HISTOGRAM_BINS];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1.0;
    }
    let n = values.len() as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    Ok(IntensityHistogram { bins })
}

/// Euclidean and cosine distances between two histograms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistDistance {
    pub euclidean: f64,
    pub cosine: f64,
}

pub fn hist_distance(a: &IntensityHistogram, b: &IntensityHistogram) -> HistDistance {
    let (mut d2, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.bins.iter().zip(&b.bins) {
        d2 += (x - y) * (x - y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    HistDistance {
        euclidean: d2.sqrt(),
        cosine: 1.0 - dot / (na.sqrt() * nb.sqrt()),
    }
}
