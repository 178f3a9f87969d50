//! Segmentation and generation metrics.

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{BinaryMask, PatchRect};
use crate::rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn pixel_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let hits = pred.values.iter().zip(gt.values.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.values.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    Foreground,
    Background,
}

/// Intersection over union of one class; 1.0 when both masks lack the class.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask, class: MaskClass) -> Result<f64> {
    same_dims(pred, gt)?;
    let want = class == MaskClass::Foreground;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values.iter().zip(gt.values.iter()) {
        let (p, g) = (p == want, g == want);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(0.5 * (iou(pred, gt, MaskClass::Foreground)? + iou(pred, gt, MaskClass::Background)?))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the Mann-Whitney rank statistic.
pub fn auc_roc_slice(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub fn auc_roc(scores: &Array2<f32>, gt: &BinaryMask) -> Result<f64> {
    if scores.dim() != gt.dims() {
        return Err(Error::DimensionMismatch(scores.dim(), gt.dims()));
    }
    let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
    let l: Vec<bool> = gt.values.iter().copied().collect();
    auc_roc_slice(&s, &l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BboxScore {
    pub iou: f64,
    /// Set when the prediction was empty (score forced to 0).
    pub empty_prediction: bool,
}

pub fn rect_iou(a: &PatchRect, b: &PatchRect) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn bbox_iou(pred: &BinaryMask, gt_box: &PatchRect) -> BboxScore {
    match pred.bbox() {
        Some(b) => BboxScore { iou: rect_iou(&b, gt_box), empty_prediction: false },
        None => BboxScore { iou: 0.0, empty_prediction: true },
    }
}

/// Covariance regularizer added to the diagonal before the matrix square root.
pub const FID_EPS: f64 = 1e-6;

/// Square root of a symmetric positive semi-definite matrix by
/// eigendecomposition; negative eigenvalues are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("eigendecomposition of {}×{} matrix did not converge", m.nrows(), m.ncols())))?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::EmptyDataset("feature set".into()))?;
    if x.len() < d + 1 {
        return Err(Error::TooFewSamples { needed: d + 1, got: x.len() });
    }
    if x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("ragged feature vectors".into()));
    }
    let n = x.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in x {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += FID_EPS;
    }
    Ok((mean, cov))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Shape(format!("feature dims {} vs {}", ma.len(), mb.len())));
    }
    let sa = sqrtm_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(inner, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition of covariance product did not converge".into()))?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = ma - mb;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Fixed random projection of an 8×8 average-pooled image through `tanh`.
/// Only meaningful for comparing sets under the same seed.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    dim: usize,
    grid: usize,
    weights: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        let grid = 8;
        let inputs = 3 * grid * grid;
        let mut r = rng::rng(rng::derive_seed(seed, &[rng::tag("fid-projection")]));
        let scale = 1.0 / (inputs as f64).sqrt();
        let weights = rng::normal_vec(&mut r, dim * inputs).into_iter().map(|w| w as f64 * scale * 4.0).collect();
        Self { dim, grid, weights }
    }
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let (c, h, w) = image.dim();
        let g = self.grid;
        if c != 3 || h < g || w < g {
            return Err(Error::Shape(format!("cannot pool {:?} to {g}×{g}", image.dim())));
        }
        let mut pooled = vec![0.0f64; 3 * g * g];
        let mut counts = vec![0usize; g * g];
        for r in 0..h {
            for col in 0..w {
                let cell = (r * g / h) * g + col * g / w;
                counts[cell] += 1;
                for ch in 0..3 {
                    pooled[ch * g * g + cell] += image[[ch, r, col]] as f64;
                }
            }
        }
        for (i, v) in pooled.iter_mut().enumerate() {
            *v = *v / counts[i % (g * g)] as f64 - 0.5;
        }
        Ok(self
            .weights
            .chunks(pooled.len())
            .map(|row| row.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>().tanh())
            .collect())
    }
}

pub fn fid_images(extractor: &dyn FeatureExtractor, a: &[Image], b: &[Image]) -> Result<f64> {
    let fa = a.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    fid(&fa, &fb)
}

fn check_scored(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::UndefinedMetric("threshold selection needs both classes".into()));
    }
    Ok(pos)
}

/// Largest decision threshold (foreground iff `score > threshold`) whose true
/// positive rate reaches `target`. The threshold sits halfway between the
/// score that must stay positive and the next lower distinct score, so it
/// generalizes the same way a maximum-margin cut would.
pub fn tpr_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    let pos = check_scored(scores, labels)?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Range(format!("TPR target {target} unreachable")));
    }
    let need = ((target * pos as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut fg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    fg.sort_by(|a, b| b.total_cmp(a));
    let keep = fg[need - 1];
    let below = scores.iter().copied().filter(|&s| s < keep).fold(f64::NEG_INFINITY, f64::max);
    Ok(if below.is_finite() { 0.5 * (keep + below) } else { keep - 0.5 })
}

/// Threshold maximizing pixel accuracy, placed at a gap midpoint.
pub fn accuracy_optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scored(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Start with everything predicted foreground.
    let mut correct = labels.iter().filter(|&&l| l).count() as i64;
    let (mut best, mut best_thr) = (correct, scores[order[0]] - 0.5);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            correct += if labels[order[i]] { -1 } else { 1 };
            i += 1;
        }
        if correct > best {
            best = correct;
            best_thr = if i < order.len() { 0.5 * (s + scores[order[i]]) } else { s + 0.5 };
        }
    }
    Ok(best_thr)
}

pub fn threshold_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s > threshold) == l).count();
    hits as f64 / scores.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub accuracy: f64,
    pub iou: f64,
    pub miou: f64,
}

pub fn score_mask(pred: &BinaryMask, gt: &BinaryMask) -> Result<MaskScores> {
    Ok(MaskScores {
        accuracy: pixel_accuracy(pred, gt)?,
        iou: iou(pred, gt, MaskClass::Foreground)?,
        miou: miou(pred, gt)?,
    })
}

pub fn mean_scores(scores: &[MaskScores]) -> Option<MaskScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(MaskScores {
        accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
        miou: scores.iter().map(|s| s.miou).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Provenance, ResolutionSpace};
    use ndarray::array;

    fn m(v: Array2<bool>) -> BinaryMask {
        BinaryMask::new(v, ResolutionSpace::Pixel, Provenance::Predicted)
    }

    #[test]
    fn hand_counted_cases() {
        let a = m(Array2::from_shape_fn((4, 4), |(r, _)| r < 2));
        let mut bv = a.values.clone();
        for c in 0..4 {
            bv[[1, c]] = !bv[[1, c]];
        }
        assert_eq!(pixel_accuracy(&a, &m(bv)).unwrap(), 0.75);
        assert_eq!(pixel_accuracy(&a, &a.invert()).unwrap(), 0.0);

        let p = m(array![[true, true], [false, false]]);
        let g = m(array![[false, true], [false, true]]);
        assert!((iou(&p, &g, MaskClass::Foreground).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let both_empty = m(Array2::from_elem((2, 2), false));
        assert_eq!(iou(&both_empty, &both_empty, MaskClass::Foreground).unwrap(), 1.0);
        assert!(matches!(pixel_accuracy(&p, &m(Array2::from_elem((3, 2), false))), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert!((auc_roc_slice(&s, &l).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(auc_roc_slice(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc_roc_slice(&[1.0, 0.0], &[false, true]).unwrap(), 0.0);
        assert_eq!(auc_roc_slice(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(matches!(auc_roc_slice(&[0.5, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bbox_cell_convention() {
        let a = PatchRect::new(0, 0, 4, 4);
        let b = PatchRect::new(2, 2, 4, 4);
        assert!((rect_iou(&a, &b) - 4.0 / 28.0).abs() < 1e-12);
        let empty = m(Array2::from_elem((8, 8), false));
        assert_eq!(bbox_iou(&empty, &a), BboxScore { iou: 0.0, empty_prediction: true });
        let full = m(Array2::from_shape_fn((8, 8), |(r, c)| r < 4 && c < 4));
        assert_eq!(bbox_iou(&full, &a).iou, 1.0);
    }

    #[test]
    fn tpr_examples() {
        let s = [0.0, 0.0, 1.0, 1.0];
        let l = [false, false, true, true];
        assert_eq!(tpr_threshold(&s, &l, 0.95).unwrap(), 0.5);
        let s = [0.1, 0.6, 0.3, 0.9, 0.2];
        let l = [false, false, true, true, true];
        let thr = tpr_threshold(&s, &l, 1.0).unwrap();
        assert!(thr < 0.2);
        assert!(tpr_threshold(&s, &l, 1.5).is_err());
    }

    #[test]
    fn accuracy_threshold_separates() {
        let s = [0.1, 0.2, 0.7, 0.9];
        let l = [false, false, true, true];
        let t = accuracy_optimal_threshold(&s, &l).unwrap();
        assert!((t - 0.45).abs() < 1e-12);
        assert_eq!(threshold_accuracy(&s, &l, t), 1.0);
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sqrtm_psd(&a).unwrap();
        assert!((&r * &r - &a).norm() < 1e-9);
    }

    #[test]
    fn fid_needs_enough_samples() {
        let a = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(fid(&a, &a), Err(Error::TooFewSamples { .. })));
    }
}
