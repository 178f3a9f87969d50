//! Pixel-accurate masks from the difference between an image and a version
//! whose preliminary foreground region was inpainted with background.

use crate::backend::{DiffusionBackend, LatentCode, PromptSpec};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{BinaryMask, PatchRect, Provenance, ResolutionSpace};
use crate::maskgen::{self, GmmConfig, GmmFit};
use crate::rng;
use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduce {
    #[default]
    Mean,
    Max,
    Luminance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitDomain {
    /// Fit the mixture on difference values inside the upsampled preliminary mask.
    #[default]
    InsidePreliminary,
    /// Fit on every pixel of the difference map.
    FullImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub reduce: ChannelReduce,
    pub fit_domain: FitDomain,
    pub gmm: GmmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineFlag {
    /// The preliminary mask had no foreground; nothing to refine.
    EmptyPreliminary,
    /// The difference field was degenerate; the mask is empty.
    EmptyRefinement,
    /// Crop-flip patch smaller than the region it covers; it was tiled.
    Tiled,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub mask: BinaryMask,
    /// Channel-reduced absolute difference, pixel resolution.
    pub difference: Array2<f32>,
    /// The background-filled image the difference was taken against.
    pub inpainted: Image,
    pub fit: Option<GmmFit>,
    pub flags: Vec<RefineFlag>,
}

/// Reduces `|diff|` over channels to one value per pixel.
pub fn channel_reduce(diff: &Array3<f32>, how: ChannelReduce) -> Array2<f32> {
    let (c, h, w) = diff.dim();
    Array2::from_shape_fn((h, w), |(r, col)| {
        let vals = (0..c).map(|ch| diff[[ch, r, col]].abs());
        match how {
            ChannelReduce::Mean => vals.sum::<f32>() / c as f32,
            ChannelReduce::Max => vals.fold(0.0, f32::max),
            ChannelReduce::Luminance if c == 3 => {
                (0.299 * diff[[0, r, col]] + 0.587 * diff[[1, r, col]] + 0.114 * diff[[2, r, col]]).abs()
            }
            ChannelReduce::Luminance => vals.sum::<f32>() / c as f32,
        }
    })
}

fn absolute_difference(a: &Image, b: &Image) -> Array3<f32> {
    let mut d = Array3::zeros(a.dim());
    Zip::from(&mut d).and(a).and(b).for_each(|o, &x, &y| *o = x - y);
    d
}

/// `M = M_pre,up ∧ (d > threshold)` with the threshold from a mixture fit on `d`.
pub fn mask_from_difference(
    difference: &Array2<f32>,
    prelim_up: &BinaryMask,
    cfg: &RefineConfig,
) -> Result<(BinaryMask, Option<GmmFit>)> {
    if difference.dim() != prelim_up.dims() {
        return Err(Error::DimensionMismatch(difference.dim(), prelim_up.dims()));
    }
    let (h, w) = difference.dim();
    let samples: Vec<f64> = match cfg.fit_domain {
        FitDomain::InsidePreliminary => difference
            .iter()
            .zip(prelim_up.values.iter())
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d as f64)
            .collect(),
        FitDomain::FullImage => difference.iter().map(|&d| d as f64).collect(),
    };
    match maskgen::fit_bimodal_gmm_with(&samples, &cfg.gmm) {
        Ok(fit) => {
            let values = Array2::from_shape_fn((h, w), |(r, c)| {
                prelim_up.values[[r, c]] && difference[[r, c]] as f64 > fit.threshold
            });
            Ok((BinaryMask::new(values, ResolutionSpace::Pixel, Provenance::Refined), Some(fit)))
        }
        Err(Error::DegenerateDistribution { .. }) | Err(Error::TooFewSamples { .. }) => {
            Ok((BinaryMask::empty(h, w, ResolutionSpace::Pixel, Provenance::Refined), None))
        }
        Err(e) => Err(e),
    }
}

fn finish(
    image: &Image,
    inpainted: Image,
    prelim_up: &BinaryMask,
    cfg: &RefineConfig,
    provenance: Provenance,
    mut flags: Vec<RefineFlag>,
) -> Result<RefineOutcome> {
    let difference = channel_reduce(&absolute_difference(image, &inpainted), cfg.reduce);
    let (mask, fit) = mask_from_difference(&difference, prelim_up, cfg)?;
    if fit.is_none() {
        flags.push(RefineFlag::EmptyRefinement);
    }
    Ok(RefineOutcome { mask: mask.with_provenance(provenance), difference, inpainted, fit, flags })
}

fn empty_outcome(image: &Image, provenance: Provenance) -> RefineOutcome {
    let (_, h, w) = image.dim();
    RefineOutcome {
        mask: BinaryMask::empty(h, w, ResolutionSpace::Pixel, provenance),
        difference: Array2::zeros((h, w)),
        inpainted: image.clone(),
        fit: None,
        flags: vec![RefineFlag::EmptyPreliminary],
    }
}

/// Replaces the preliminary region of the latent with seeded noise, inpaints
/// it under the background prompt, and thresholds the pixel difference.
pub fn refined_mask(
    backend: &dyn DiffusionBackend,
    image: &Image,
    m_pre: &BinaryMask,
    background: &PromptSpec,
    seed: u64,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    if m_pre.is_empty() {
        return Ok(empty_outcome(image, Provenance::Refined));
    }
    let z0 = backend.encode(image)?;
    if m_pre.dims() != z0.spatial() {
        return Err(Error::DimensionMismatch(m_pre.dims(), z0.spatial()));
    }
    let dim = z0.values.dim();
    let mut r = rng::rng(rng::derive_seed(seed, &[rng::tag("refine-noise")]));
    let noise = rng::normal_vec(&mut r, dim.0 * dim.1 * dim.2);
    let mut masked = z0.values.clone();
    for ((c, i, j), v) in masked.indexed_iter_mut() {
        if m_pre.values[[i, j]] {
            *v = noise[(c * dim.1 + i) * dim.2 + j];
        }
    }
    let z_masked = LatentCode { values: masked, timestep: 0, spatial_scale: z0.spatial_scale };
    let inpainted = backend.inpaint(&z_masked, m_pre, background, rng::derive_seed(seed, &[rng::tag("refine-inpaint")]))?;
    let (_, h, w) = image.dim();
    let prelim_up = maskgen::upsample_mask(m_pre, (h, w));
    finish(image, inpainted, &prelim_up, cfg, Provenance::Refined, Vec::new())
}

/// Largest axis-aligned rectangle of `true` cells (histogram method).
pub fn largest_rectangle(grid: &Array2<bool>) -> Option<PatchRect> {
    let (h, w) = grid.dim();
    let mut heights = vec![0usize; w];
    let mut best: Option<PatchRect> = None;
    for r in 0..h {
        for c in 0..w {
            heights[c] = if grid[[r, c]] { heights[c] + 1 } else { 0 };
        }
        let mut stack: Vec<usize> = Vec::new();
        for c in 0..=w {
            let cur = if c < w { heights[c] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] < cur {
                    break;
                }
                stack.pop();
                let height = heights[top];
                let left = stack.last().map_or(0, |&s| s + 1);
                let width = c - left;
                if height > 0 && best.is_none_or(|b| height * width > b.area()) {
                    best = Some(PatchRect::new(r + 1 - height, left, height, width));
                }
            }
            stack.push(c);
        }
    }
    best
}

/// Ablation: fills the preliminary region with a horizontally mirrored copy
/// of the largest background rectangle instead of a learned inpaint.
pub fn crop_flip_mask(image: &Image, m_pre: &BinaryMask, cfg: &RefineConfig) -> Result<RefineOutcome> {
    if m_pre.is_empty() {
        return Ok(empty_outcome(image, Provenance::CropAblation));
    }
    let (_, h, w) = image.dim();
    let prelim_up = if m_pre.dims() == (h, w) { m_pre.clone() } else { maskgen::upsample_mask(m_pre, (h, w)) };
    let patch = largest_rectangle(&prelim_up.values.mapv(|v| !v))
        .ok_or_else(|| Error::Range("preliminary mask leaves no background for the ablation".into()))?;
    let region = prelim_up.bbox().expect("non-empty");
    let mut flags = Vec::new();
    if patch.height < region.height || patch.width < region.width {
        flags.push(RefineFlag::Tiled);
    }
    let mut filled = image.clone();
    for r in region.top..region.bottom() {
        for c in region.left..region.right() {
            if !prelim_up.values[[r, c]] {
                continue;
            }
            let pr = patch.top + (r - region.top) % patch.height;
            let pc = patch.left + patch.width - 1 - (c - region.left) % patch.width;
            for ch in 0..3 {
                filled[[ch, r, c]] = image[[ch, pr, pc]];
            }
        }
    }
    finish(image, filled, &prelim_up, cfg, Provenance::CropAblation, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn channel_reduce_examples() {
        let d = Array3::from_shape_fn((3, 1, 2), |(_, _, c)| if c == 0 { 0.3 } else { -0.6 });
        let m = channel_reduce(&d, ChannelReduce::Mean);
        assert!((m[[0, 0]] - 0.3).abs() < 1e-7 && (m[[0, 1]] - 0.6).abs() < 1e-7);
        assert!(channel_reduce(&Array3::zeros((3, 2, 2)), ChannelReduce::Mean).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn largest_rectangle_finds_block() {
        let g = array![
            [true, true, false, true],
            [true, true, true, true],
            [true, true, true, true],
            [false, true, true, true]
        ];
        let r = largest_rectangle(&g).unwrap();
        let mut best = 0;
        for (t, l) in (0..4).flat_map(|t| (0..4).map(move |l| (t, l))) {
            for (b, rt) in (t + 1..=4).flat_map(|b| (l + 1..=4).map(move |rt| (b, rt))) {
                if g.slice(ndarray::s![t..b, l..rt]).iter().all(|&v| v) {
                    best = best.max((b - t) * (rt - l));
                }
            }
        }
        assert_eq!(r.area(), best);
        for i in r.top..r.bottom() {
            for j in r.left..r.right() {
                assert!(g[[i, j]]);
            }
        }
        assert!(largest_rectangle(&Array2::from_elem((3, 3), false)).is_none());
    }

    #[test]
    fn constructed_difference_is_recovered_exactly() {
        let truth = Array2::from_shape_fn((32, 32), |(r, c)| (8..20).contains(&r) && (10..24).contains(&c));
        let prelim = Array2::from_shape_fn((32, 32), |(r, c)| (4..24).contains(&r) && (4..28).contains(&c));
        let d = truth.mapv(|v| if v { 1.0f32 } else { 0.0 });
        let up = BinaryMask::new(prelim.clone(), ResolutionSpace::Pixel, Provenance::Preliminary);
        let (m, fit) = mask_from_difference(&d, &up, &RefineConfig::default()).unwrap();
        assert!(fit.is_some());
        assert_eq!(m.values, Zip::from(&truth).and(&prelim).map_collect(|&a, &b| a && b));
    }

    #[test]
    fn uniform_background_is_empty_refinement() {
        let img = Image::from_elem((3, 16, 16), 0.4);
        let mut pre = BinaryMask::empty(16, 16, ResolutionSpace::Pixel, Provenance::Preliminary);
        for r in 4..8 {
            for c in 4..8 {
                pre.values[[r, c]] = true;
            }
        }
        let out = crop_flip_mask(&img, &pre, &RefineConfig::default()).unwrap();
        assert!(out.mask.is_empty());
        assert!(out.flags.contains(&RefineFlag::EmptyRefinement));
        assert_eq!(out.mask.provenance, Provenance::CropAblation);
    }
}
