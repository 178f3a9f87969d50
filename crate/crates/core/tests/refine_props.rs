mod common;

use distill_core::backend::PromptSpec;
use distill_core::imageio::Image;
use distill_core::mask::{BinaryMask, Provenance, ResolutionSpace};
use distill_core::maskgen;
use distill_core::refine::{self, ChannelReduce, RefineConfig, RefineFlag};
use distill_core::rng;
use distill_core::toyshapes::ShapeKind;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.values.iter().zip(b.values.iter()).all(|(&x, &y)| !x || y)
}

fn latent_mask(seed: u64, density: f64) -> BinaryMask {
    let mut r = rng::rng(seed);
    BinaryMask::new(Array2::from_shape_fn((16, 16), |_| r.random::<f64>() < density), ResolutionSpace::Latent, Provenance::Preliminary)
}

#[test]
fn empty_preliminary_gives_flagged_empty_mask() {
    let b = common::toy();
    let img = common::shape_image(ShapeKind::Circle, 1).image;
    let bg = PromptSpec::background(&b).unwrap();
    let out = refine::refined_mask(&b, &img, &latent_mask(0, 0.0), &bg, 3, &RefineConfig::default()).unwrap();
    assert!(out.mask.is_empty());
    assert_eq!(out.mask.dims(), (64, 64));
    assert_eq!(out.flags, vec![RefineFlag::EmptyPreliminary]);
}

#[test]
fn refinement_replays_under_a_seed() {
    let b = common::toy();
    let s = common::shape_image(ShapeKind::Square, 2);
    let bg = PromptSpec::background(&b).unwrap();
    let pre = maskgen::downsample_mask(&s.mask, 4, ResolutionSpace::Latent);
    let cfg = RefineConfig::default();
    let a = refine::refined_mask(&b, &s.image, &pre, &bg, 7, &cfg).unwrap();
    let c = refine::refined_mask(&b, &s.image, &pre, &bg, 7, &cfg).unwrap();
    assert_eq!(a.mask, c.mask);
    assert_eq!(a.inpainted, c.inpainted);
}

#[test]
fn channel_reduce_matches_direct_loop() {
    let mut r = rng::rng(5);
    for _ in 0..20 {
        let d = Array3::from_shape_fn((3, 9, 7), |_| r.random_range(-1.0f32..1.0));
        let got = refine::channel_reduce(&d, ChannelReduce::Mean);
        for i in 0..9 {
            for j in 0..7 {
                let mut s = 0.0f32;
                for c in 0..3 {
                    s += d[[c, i, j]].abs();
                }
                assert!((got[[i, j]] - s / 3.0).abs() < 1e-6);
            }
        }
    }
    let flat = Array3::from_elem((3, 2, 2), 0.3f32);
    assert!(refine::channel_reduce(&flat, ChannelReduce::Mean).iter().all(|&v| (v - 0.3).abs() < 1e-7));
}

/// Uniform background, one flat-coloured disk: the mirrored background patch
/// is a perfect inpaint, so the ablation must equal refinement against the
/// true background.
#[test]
fn crop_flip_equals_ideal_inpainting_when_background_is_flat() {
    let bg_color = [0.2f32, 0.5, 0.3];
    let background = Image::from_shape_fn((3, 64, 64), |(c, _, _)| bg_color[c]);
    let disk = Array2::from_shape_fn((64, 64), |(r, c)| (r as f32 - 28.5).powi(2) + (c as f32 - 24.5).powi(2) <= 100.0);
    let mut image = background.clone();
    for ((c, r, col), v) in image.indexed_iter_mut() {
        if disk[[r, col]] {
            *v = [0.9, 0.1, 0.7][c];
        }
    }
    let pre = BinaryMask::new(
        Array2::from_shape_fn((16, 16), |(r, c)| (3..12).contains(&r) && (2..11).contains(&c)),
        ResolutionSpace::Latent,
        Provenance::Preliminary,
    );
    let cfg = RefineConfig::default();
    let flip = refine::crop_flip_mask(&image, &pre, &cfg).unwrap();
    let diff = refine::channel_reduce(&(&image - &background), cfg.reduce);
    let (ideal, _) = refine::mask_from_difference(&diff, &maskgen::upsample_mask(&pre, (64, 64)), &cfg).unwrap();
    assert_eq!(flip.mask.values, ideal.values);
    assert_eq!(flip.mask.values, disk);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn refined_masks_stay_inside_the_preliminary_region(seed in 0u64..10_000, density in 0.05f64..0.9) {
        let b = common::toy();
        let img = common::shape_image(ShapeKind::Diamond, seed).image;
        let bg = PromptSpec::background(&b).unwrap();
        let pre = latent_mask(seed, density);
        let up = maskgen::upsample_mask(&pre, (64, 64));
        let out = refine::refined_mask(&b, &img, &pre, &bg, seed, &RefineConfig::default()).unwrap();
        prop_assert!(subset(&out.mask, &up));
        if let Ok(flip) = refine::crop_flip_mask(&img, &pre, &RefineConfig::default()) {
            prop_assert!(subset(&flip.mask, &up));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn difference_masks_are_products_with_the_preliminary_mask(seed in 0u64..100_000) {
        let mut r = rng::rng(seed);
        let d = Array2::from_shape_fn((24, 24), |_| r.random_range(0.0f32..1.0));
        let pre = BinaryMask::new(Array2::from_shape_fn((24, 24), |_| r.random::<bool>()), ResolutionSpace::Pixel, Provenance::Preliminary);
        let (m, _) = refine::mask_from_difference(&d, &pre, &RefineConfig::default()).unwrap();
        prop_assert!(subset(&m, &pre));
    }
}
