//! Binary masks and axis-aligned rectangles.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSpace {
    Latent,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Preliminary,
    Refined,
    CropAblation,
    GroundTruth,
    Predicted,
}

/// Boolean foreground map (`true` = foreground), indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub values: Array2<bool>,
    pub space: ResolutionSpace,
    pub provenance: Provenance,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>, space: ResolutionSpace, provenance: Provenance) -> Self {
        Self { values, space, provenance }
    }

    pub fn empty(h: usize, w: usize, space: ResolutionSpace, provenance: Provenance) -> Self {
        Self::new(Array2::from_elem((h, w), false), space, provenance)
    }

    pub fn full(h: usize, w: usize, space: ResolutionSpace, provenance: Provenance) -> Self {
        Self::new(Array2::from_elem((h, w), true), space, provenance)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.values.len().max(1) as f64
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn invert(&self) -> Self {
        Self::new(self.values.mapv(|v| !v), self.space, self.provenance)
    }

    /// Tight bounding box of the foreground, if any.
    pub fn bbox(&self) -> Option<PatchRect> {
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        for ((r, c), &v) in self.values.indexed_iter() {
            if v {
                top = top.min(r);
                left = left.min(c);
                bottom = bottom.max(r);
                right = right.max(c);
            }
        }
        (top != usize::MAX).then(|| PatchRect::new(top, left, bottom - top + 1, right - left + 1))
    }

    /// Ratio-preserving float copy (1.0 for foreground).
    pub fn to_f32(&self) -> Array2<f32> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

/// Axis-aligned rectangle in grid cells: rows `top..top+height`, columns `left..left+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.bottom() <= h && self.right() <= w
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.bottom() && c >= self.left && c < self.right()
    }

    pub fn intersection_area(&self, other: &PatchRect) -> usize {
        let h = self.bottom().min(other.bottom()).saturating_sub(self.top.max(other.top));
        let w = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        h * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bbox_is_tight() {
        let m = BinaryMask::new(
            array![[false, false, false], [false, true, true], [false, true, false]],
            ResolutionSpace::Pixel,
            Provenance::GroundTruth,
        );
        assert_eq!(m.bbox(), Some(PatchRect::new(1, 1, 2, 2)));
        assert_eq!(m.count(), 3);
        assert!(BinaryMask::empty(2, 2, ResolutionSpace::Pixel, Provenance::Predicted).bbox().is_none());
    }

    #[test]
    fn rect_intersection() {
        let a = PatchRect::new(0, 0, 4, 4);
        let b = PatchRect::new(2, 2, 4, 4);
        assert_eq!(a.intersection_area(&b), 4);
        assert_eq!(a.intersection_area(&PatchRect::new(4, 4, 1, 1)), 0);
    }
}
