mod common;

use distill_core::backend::{combine_guidance, DiffusionBackend, GuidanceSpec, LatentCode, PromptSpec};
use distill_core::distill::{
    self, background_example, finetune, moving_average, sample_background_rect, FinetuneConfig, FinetuneRecord, Objective,
    RectConstraints,
};
use distill_core::mask::{BinaryMask, PatchRect, Provenance, ResolutionSpace};
use distill_core::rng;
use distill_core::toyshapes::{self, ToyShapesConfig};
use ndarray::Array3;
use proptest::prelude::*;

fn left_half_foreground() -> BinaryMask {
    let mut m = BinaryMask::empty(8, 8, ResolutionSpace::Pixel, Provenance::Preliminary);
    m.values.slice_mut(ndarray::s![.., ..4]).fill(true);
    m
}

/// Probability that one proposal is accepted, by enumerating every size the
/// constraints admit and every position of that size.
fn acceptance_oracle(mask: &BinaryMask, c: &RectConstraints) -> f64 {
    let (h, w) = mask.dims();
    let mut per_size = Vec::new();
    for rh in 1..=h {
        for rw in 1..=w {
            let area = (rh * rw) as f64 / (h * w) as f64;
            let aspect = rw as f64 / rh as f64;
            let ok = area >= c.min_area_fraction
                && area <= c.max_area_fraction
                && aspect >= c.min_aspect - 1e-12
                && aspect <= c.max_aspect + 1e-12;
            if !ok {
                continue;
            }
            let (mut valid, mut all) = (0, 0);
            for top in 0..=h - rh {
                for left in 0..=w - rw {
                    all += 1;
                    let clear = (top..top + rh).all(|r| (left..left + rw).all(|col| !mask.values[[r, col]]));
                    valid += clear as usize;
                }
            }
            per_size.push(valid as f64 / all as f64);
        }
    }
    per_size.iter().sum::<f64>() / per_size.len() as f64
}

#[test]
fn rectangle_acceptance_rate_matches_enumeration() {
    let mask = left_half_foreground();
    let c = RectConstraints::default();
    let mut draws = 0usize;
    for seed in 0..10_000 {
        let (rect, tries) = sample_background_rect(&mask, &c, seed).unwrap();
        assert!(rect.left >= 4 && rect.right() <= 8 && rect.bottom() <= 8, "{rect:?}");
        draws += tries;
    }
    let rate = 10_000.0 / draws as f64;
    let expected = acceptance_oracle(&mask, &c);
    assert!((rate - expected).abs() <= 0.05 * expected, "acceptance {rate} vs enumerated {expected}");
}

fn shape_records(n: usize, seed: u64) -> Vec<FinetuneRecord> {
    let cfg = ToyShapesConfig::default();
    (0..n)
        .map(|i| {
            let s = toyshapes::dataset_sample(&cfg, seed, i).unwrap();
            FinetuneRecord { image: s.image, object: s.kind.word().to_string(), prelim_up: Some(s.mask) }
        })
        .collect()
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let mut b = common::toy();
    let before = b.parameters();
    let cfg = FinetuneConfig { steps: 0, ..FinetuneConfig::default() };
    let report = finetune(&mut b, &shape_records(4, 1), &cfg, |_| {}).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(b.parameters(), before);
}

#[test]
fn objectives_alternate_in_the_training_log() {
    let mut b = common::toy();
    let cfg = FinetuneConfig { steps: 24, batch: 2, ..FinetuneConfig::default() };
    let report = finetune(&mut b, &shape_records(6, 2), &cfg, |_| {}).unwrap();
    assert_eq!(report.log.len(), 24);
    for k in 1..=12 {
        for start in 0..=24 - 2 * k {
            let fg = report.log[start..start + 2 * k].iter().filter(|r| r.objective == Objective::Foreground).count();
            assert_eq!(fg, k);
        }
    }
    assert!(report.log.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn background_loss_ignores_everything_outside_the_rectangle() {
    let b = common::toy();
    let rec = &shape_records(1, 3)[0];
    let rect = PatchRect::new(8, 40, 16, 20);
    let ex = background_example(&b, rec, &rect, 5).unwrap();
    let footprint = ex.loss_mask.clone().unwrap();
    assert_eq!(footprint.sum(), (4 * 5) as f32);
    assert!(b.example_loss(&ex).unwrap().is_finite());
    let g = b.output_gradient(std::slice::from_ref(&ex), 0).unwrap();
    for ((_, i, j), v) in g.indexed_iter() {
        if footprint[[i, j]] == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
    assert!(g.iter().any(|v| *v != 0.0));
}

#[test]
fn misaligned_rectangles_are_rejected() {
    let b = common::toy();
    let rec = &shape_records(1, 3)[0];
    assert!(background_example(&b, rec, &PatchRect::new(1, 0, 8, 8), 0).is_err());
}

/// Learning the background objective from scratch: its moving-average loss
/// drops by at least 30% over a 2000-step fine-tune.
#[test]
fn background_loss_falls_during_finetuning() {
    let mut b = common::toy();
    let cfg = FinetuneConfig { steps: 2000, ..FinetuneConfig::default() };
    let report = finetune(&mut b, &shape_records(64, 4), &cfg, |_| {}).unwrap();
    let bg: Vec<f32> = report.losses(Objective::Background).into_iter().filter(|l| l.is_finite()).collect();
    let ma = moving_average(&bg, 50);
    let (first, last) = (ma[0], *ma.last().unwrap());
    assert!(last <= 0.7 * first, "background loss moving average {first} -> {last}");
}

fn state(seed: u64) -> (distill_core::backend::ToyBackend, LatentCode) {
    let b = common::toy();
    let mut r = rng::rng(seed);
    let values = Array3::from_shape_vec((4, 16, 16), rng::normal_vec(&mut r, 4 * 256)).unwrap();
    let t = 1 + (seed as usize % b.schedule().len());
    (b, LatentCode { values, timestep: t, spatial_scale: 4 })
}

#[test]
fn unit_and_zero_scales_select_one_branch() {
    let (b, z) = state(1);
    let fg = PromptSpec::foreground(&b, "triangle").unwrap();
    let bg = PromptSpec::background(&b).unwrap();
    let eps_f = b.denoise_step(&z, &fg, false).unwrap().predicted_update;
    let eps_b = b.denoise_step(&z, &bg, false).unwrap().predicted_update;
    let one = GuidanceSpec::new(1.0, fg.clone(), bg.clone()).unwrap();
    let zero = GuidanceSpec::new(0.0, fg, bg).unwrap();
    assert_eq!(distill::guided_update(&b, &z, &one).unwrap(), eps_f);
    assert_eq!(distill::guided_update(&b, &z, &zero).unwrap(), eps_b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn guidance_is_affine_in_scale(seed in 0u64..10_000, w in -3.0f32..8.0) {
        let (b, z) = state(seed);
        let fg = PromptSpec::foreground(&b, "circle").unwrap();
        let bg = PromptSpec::background(&b).unwrap();
        let eps_f = b.denoise_step(&z, &fg, false).unwrap().predicted_update;
        let eps_b = b.denoise_step(&z, &bg, false).unwrap().predicted_update;
        let got = distill::guided_update(&b, &z, &GuidanceSpec::new(w, fg, bg).unwrap()).unwrap();
        for ((g, f), bb) in got.iter().zip(&eps_f).zip(&eps_b) {
            let expect = *bb as f64 + w as f64 * (*f as f64 - *bb as f64);
            prop_assert!((*g as f64 - expect).abs() <= 1e-5 * (1.0 + expect.abs()));
        }
        let swapped = combine_guidance(1.0 - w, &eps_b, &eps_f);
        for (a, s) in got.iter().zip(&swapped) {
            prop_assert!((a - s).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }
}
