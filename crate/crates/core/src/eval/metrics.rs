use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

fn same_shape(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    Ok(())
}

pub fn mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    same_shape(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::shape("empty arrays"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sse / pred.len() as f64)
}

fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if sbb == 0.0 {
        return None;
    }
    if saa == 0.0 {
        return Some(0.0);
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spatial Pearson correlation per frame, averaged over frames.
///
/// Frames with constant truth are skipped; a constant predicted frame scores 0.
pub fn cc(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    same_shape(pred, truth)?;
    let scores: Vec<f64> = pred.rows().into_iter().zip(truth.rows()).filter_map(|(p, t)| pearson(p, t)).collect();
    if scores.is_empty() {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Otsu split over a 256-bin histogram on `[min, max]`: values in bins
/// `0..=bin` form the lower class. `threshold` lies between the two classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub bin: usize,
    pub threshold: f64,
    min: f64,
    width: f64,
}

impl OtsuSplit {
    pub fn bin_of(&self, x: f64) -> usize {
        (((x - self.min) / self.width) as usize).min(OTSU_BINS - 1)
    }

    pub fn is_upper(&self, x: f64) -> bool {
        self.bin_of(x) > self.bin
    }
}

pub fn otsu(values: &[f64]) -> Result<OtsuSplit> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("otsu input".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(max > min) {
        return Err(Error::ConstantInput);
    }
    let width = (max - min) / OTSU_BINS as f64;
    let mut split = OtsuSplit { bin: 0, threshold: min + width, min, width };
    let mut hist = [0usize; OTSU_BINS];
    for &v in values {
        hist[split.bin_of(v)] += 1;
    }
    let center = |b: usize| min + (b as f64 + 0.5) * width;
    let total = values.len() as f64;
    let total_sum: f64 = (0..OTSU_BINS).map(|b| hist[b] as f64 * center(b)).sum();
    let (mut count0, mut sum0) = (0.0, 0.0);
    let mut best = f64::NEG_INFINITY;
    for b in 0..OTSU_BINS - 1 {
        count0 += hist[b] as f64;
        sum0 += hist[b] as f64 * center(b);
        let count1 = total - count0;
        let score = if count0 == 0.0 || count1 == 0.0 {
            0.0
        } else {
            let d = sum0 / count0 - (total_sum - sum0) / count1;
            (count0 / total) * (count1 / total) * d * d
        };
        if score > best {
            best = score;
            split.bin = b;
        }
    }
    // Candidates separated only by empty bins give the same partition; report
    // the middle of that gap.
    let mut last = split.bin;
    while last + 1 < OTSU_BINS - 1 && hist[last + 1] == 0 {
        last += 1;
    }
    split.threshold = min + 0.5 * ((split.bin + 1) as f64 + (last + 1) as f64) * width;
    Ok(split)
}

/// Between-class-variance maximizing threshold. Ties between distinct
/// partitions go to the lower one.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    otsu(values).map(|s| s.threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Truth,
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbnormalMask {
    pub mask: Vec<bool>,
    pub source: MaskSource,
    /// Otsu threshold on the normalized activation delay.
    pub threshold: f64,
}

impl AbnormalMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Normalized activation delay per node: the first frame at which the
/// signal exceeds the midpoint of its global range (`T` if it never does),
/// min-max scaled to `[0, 1]`.
pub fn activation_delay(x: &Array2<f64>) -> Result<Vec<f64>> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("activation signal".into()));
    }
    let level = lo + 0.5 * (hi - lo);
    let frames = x.nrows();
    let delay: Vec<f64> = x
        .columns()
        .into_iter()
        .map(|col| col.iter().position(|&u| u > level).unwrap_or(frames) as f64)
        .collect();
    let dmin = delay.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = delay.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(dmax > dmin) {
        return Err(Error::ConstantInput);
    }
    Ok(delay.into_iter().map(|d| (d - dmin) / (dmax - dmin)).collect())
}

/// Late or absent activation, separated from the rest by Otsu's method.
pub fn abnormal_mask(x: &Array2<f64>, source: MaskSource) -> Result<AbnormalMask> {
    let feature = activation_delay(x)?;
    let split = otsu(&feature)?;
    Ok(AbnormalMask { mask: feature.iter().map(|&f| split.is_upper(f)).collect(), source, threshold: split.threshold })
}

/// `2|a ∩ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks of length {} and {}", a.len(), b.len())));
    }
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
