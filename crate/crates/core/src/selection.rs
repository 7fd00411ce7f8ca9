//! Importance scoring of scans (uncertainty, consistency, overlap) and the
//! revision / reuse selectors built on it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{dsc, AnnotationSet, ClassId, Grid, Image, ProbGrid};
use crate::error::{Error, Result};
use crate::hybrid::binarize;
use crate::model::{predict, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub uncertainty: f64,
    pub consistency: f64,
    pub overlap: f64,
}

impl Default for ImportanceWeights {
    fn default() -> Self {
        ImportanceWeights {
            uncertainty: 1.0 / 3.0,
            consistency: 1.0 / 3.0,
            overlap: 1.0 / 3.0,
        }
    }
}

impl ImportanceWeights {
    pub fn new(uncertainty: f64, consistency: f64, overlap: f64) -> Result<Self> {
        let w = ImportanceWeights {
            uncertainty,
            consistency,
            overlap,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.uncertainty, self.consistency, self.overlap];
        if parts.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Contract(
                "importance weights must be nonnegative".into(),
            ));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("importance weights must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanScore {
    pub scan_id: String,
    pub uncertainty: f64,
    pub consistency: f64,
    pub overlap: f64,
    pub importance: f64,
}

impl ScanScore {
    pub fn new(
        scan_id: impl Into<String>,
        u: f64,
        c: f64,
        o: f64,
        weights: &ImportanceWeights,
    ) -> Self {
        ScanScore {
            scan_id: scan_id.into(),
            uncertainty: u,
            consistency: c,
            overlap: o,
            importance: importance(u, c, o, weights),
        }
    }
}

fn binary_entropy_bits(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h / std::f64::consts::LN_2
}

/// Mean binary entropy (in bits) over every class and pixel.
pub fn uncertainty_score(probs: &BTreeMap<ClassId, ProbGrid>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for grid in probs.values() {
        for &p in grid.as_slice() {
            sum += binary_entropy_bits(p);
        }
        count += grid.len();
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).clamp(0.0, 1.0)
    }
}

/// Exactly invertible grid symmetries used for test-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate180,
    /// Swaps rows and columns; only invertible in place on square grids.
    Transpose,
}

impl Augmentation {
    pub const DEFAULT_SET: [Augmentation; 4] = [
        Augmentation::Identity,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
        Augmentation::Rotate180,
    ];

    pub fn is_invertible_on(self, dims: (usize, usize)) -> bool {
        self != Augmentation::Transpose || dims.0 == dims.1
    }

    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augmentation::Identity => (r, c),
            Augmentation::FlipHorizontal => (r, w - 1 - c),
            Augmentation::FlipVertical => (h - 1 - r, c),
            Augmentation::Rotate180 => (h - 1 - r, w - 1 - c),
            Augmentation::Transpose => (c, r),
        }
    }

    /// Applies the transform. Every supported transform is its own inverse,
    /// so this also undoes it.
    pub fn apply<T: Copy>(self, grid: &Grid<T>) -> Result<Grid<T>> {
        let (h, w) = grid.dims();
        if !self.is_invertible_on((h, w)) {
            return Err(Error::Contract(format!(
                "{self:?} is not invertible on a {h}x{w} grid"
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = self.source(r, c, h, w);
                data.push(*grid.get(sr, sc));
            }
        }
        Grid::from_vec(h, w, data)
    }

    pub fn invert<T: Copy>(self, grid: &Grid<T>) -> Result<Grid<T>> {
        self.apply(grid)
    }
}

/// Agreement of binarized predictions across augmentations: mean pairwise
/// DSC over augmentation pairs, averaged over classes.
pub fn consistency_score(
    params: &ModelParams,
    image: &Image,
    classes: &BTreeSet<ClassId>,
    augmentations: &[Augmentation],
) -> Result<f64> {
    if augmentations.len() < 2 {
        return Err(Error::Contract(
            "consistency needs at least two augmentations".into(),
        ));
    }
    if let Some(a) = augmentations
        .iter()
        .find(|a| !a.is_invertible_on(image.dims()))
    {
        return Err(Error::Contract(format!(
            "{a:?} is not invertible on this image"
        )));
    }
    if classes.is_empty() {
        return Ok(1.0);
    }
    let mut per_aug = Vec::with_capacity(augmentations.len());
    for aug in augmentations {
        let probs = predict(params, &aug.apply(image)?, classes)?;
        let masks: BTreeMap<ClassId, _> = probs
            .iter()
            .map(|(&k, p)| Ok((k, aug.invert(&binarize(p, 0.5))?)))
            .collect::<Result<_>>()?;
        per_aug.push(masks);
    }
    let mut total = 0.0;
    for k in classes {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..per_aug.len() {
            for j in i + 1..per_aug.len() {
                sum += dsc(&per_aug[i][k], &per_aug[j][k])?;
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of foreground pixels claimed by two or more channels.
pub fn overlap_score(masks: &AnnotationSet) -> f64 {
    let mut counts: Vec<u16> = Vec::new();
    for ch in masks.channels() {
        if counts.is_empty() {
            counts = vec![0; ch.mask.len()];
        }
        for (c, &v) in counts.iter_mut().zip(ch.mask.as_slice()) {
            *c += (v != 0) as u16;
        }
    }
    let any = counts.iter().filter(|&&c| c >= 1).count();
    if any == 0 {
        return 0.0;
    }
    counts.iter().filter(|&&c| c >= 2).count() as f64 / any as f64
}

/// `w_u·u + w_c·(1 − c) + w_o·o`.
pub fn importance(u: f64, c: f64, o: f64, weights: &ImportanceWeights) -> f64 {
    weights.uncertainty * u + weights.consistency * (1.0 - c) + weights.overlap * o
}

fn by_importance(a: &ScanScore, b: &ScanScore) -> Ordering {
    b.importance
        .total_cmp(&a.importance)
        .then_with(|| a.scan_id.cmp(&b.scan_id))
}

fn ranked(scores: &[ScanScore]) -> Vec<&ScanScore> {
    let mut v: Vec<&ScanScore> = scores.iter().collect();
    v.sort_by(|a, b| by_importance(a, b));
    v
}

/// The `k` most important scans, highest first; ties go to the smaller id.
pub fn select_for_revision(scores: &[ScanScore], k: usize) -> Result<Vec<String>> {
    if k > scores.len() {
        return Err(Error::Contract(format!(
            "cannot select {k} scans from a pool of {}",
            scores.len()
        )));
    }
    Ok(ranked(scores)
        .into_iter()
        .take(k)
        .map(|s| s.scan_id.clone())
        .collect())
}

/// Number of scans reused for a fraction `r` of `n`: `⌈r·n⌉`.
pub fn reuse_count(fraction: f64, n: usize) -> usize {
    // Guards against products like 0.07 * 100 = 7.000000000000001.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// The top `⌈r·|previous|⌉` previously annotated scans by importance.
pub fn select_reuse(previous: &[ScanScore], fraction: f64) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Contract(format!(
            "reuse fraction {fraction} outside [0, 1]"
        )));
    }
    let k = reuse_count(fraction, previous.len()).min(previous.len());
    select_for_revision(previous, k)
}
