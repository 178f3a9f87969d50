mod common;

use distill_core::backend::{
    pretrain, DiffusionBackend, GuidanceSpec, LatentCode, PretrainConfig, PromptSpec,
};
use distill_core::distill::moving_average;
use distill_core::mask::{BinaryMask, Provenance, ResolutionSpace};
use distill_core::rng;
use distill_core::toyshapes::ShapeKind;
use ndarray::Array3;

fn noise(seed: u64, dim: (usize, usize, usize)) -> Array3<f32> {
    let mut r = rng::rng(seed);
    Array3::from_shape_vec(dim, rng::normal_vec(&mut r, dim.0 * dim.1 * dim.2)).unwrap()
}

/// Checks shared by every backend implementation.
fn contract(b: &dyn DiffusionBackend) {
    let d = b.descriptor().clone();
    let img = common::shape_image(ShapeKind::Circle, 3).image;
    let z0 = b.encode(&img).unwrap();
    assert_eq!(z0.values.dim(), (4, 16, 16));
    let prompt = PromptSpec::foreground(b, "circle").unwrap();
    let zt = b.add_noise(&z0, 10, &noise(1, z0.values.dim())).unwrap();

    let off = b.denoise_step(&zt, &prompt, false).unwrap();
    assert!(off.attention_records.is_empty());
    assert!(off.predicted_update.iter().all(|v| v.is_finite()));

    let on = b.denoise_step(&zt, &prompt, true).unwrap();
    assert_eq!(on.attention_records.len(), d.layer_resolutions.len() * d.heads);
    for r in &on.attention_records {
        assert_eq!(r.spatial_shape, d.layer_resolutions[r.layer_index]);
        assert_eq!(r.probabilities.ncols(), prompt.len());
        for row in r.probabilities.rows() {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-5, "row sums to {}", row.sum());
        }
    }
    assert_eq!(on.predicted_update, off.predicted_update);
    assert_eq!(b.denoise_step(&zt, &prompt, true).unwrap().attention_records, on.attention_records);

    assert_eq!(b.add_noise(&z0, 0, &noise(2, z0.values.dim())).unwrap().values, z0.values);
    assert_eq!(
        b.add_noise(&z0, 7, &noise(2, z0.values.dim())).unwrap(),
        b.add_noise(&z0, 7, &noise(2, z0.values.dim())).unwrap()
    );
    assert!(b.denoise_step(&z0, &prompt, false).is_err(), "timestep 0 must be rejected");

    let none = BinaryMask::empty(16, 16, ResolutionSpace::Latent, Provenance::Preliminary);
    let kept = b.inpaint(&z0, &none, &prompt, 5).unwrap();
    assert_eq!(kept, b.decode(&z0).unwrap().mapv(|v| v.clamp(0.0, 1.0)));
    let mut hole = none.clone();
    hole.values.slice_mut(ndarray::s![4..10, 4..10]).fill(true);
    assert_eq!(b.inpaint(&z0, &hole, &prompt, 5).unwrap(), b.inpaint(&z0, &hole, &prompt, 5).unwrap());

    let bg = PromptSpec::background(b).unwrap();
    let plain = b.sample(&GuidanceSpec::unguided(prompt.clone()), 9).unwrap();
    assert_eq!(plain, b.sample(&GuidanceSpec::unguided(prompt.clone()), 9).unwrap());
    let unit = GuidanceSpec::new(1.0, prompt.clone(), bg).unwrap();
    assert_eq!(b.sample(&unit, 9).unwrap(), plain);
}

#[test]
fn toy_backend_meets_the_contract() {
    contract(&common::toy());
}

#[test]
fn checkpoint_adapter_meets_the_same_contract() {
    let a = common::adapter_over(common::toy());
    contract(&a);
    let prompt = PromptSpec::foreground(&a, "circle").unwrap();
    assert_eq!(prompt.len(), 12, "adapter pads prompts to the fixed length");
}

#[test]
fn forward_noise_variance_approaches_unit_at_the_last_step() {
    let b = common::toy();
    let t_max = b.schedule().len();
    let z0 = LatentCode { values: Array3::from_elem((4, 16, 16), 0.8), timestep: 0, spatial_scale: 4 };
    let variance = |t: usize| {
        let xs: Vec<f64> = (0..1000)
            .map(|s| b.add_noise(&z0, t, &noise(100 + s, (4, 16, 16))).unwrap().values[[1, 5, 7]] as f64)
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let late = variance(t_max);
    assert!((late - 1.0).abs() < 0.1, "variance at T = {late}");
    assert!(variance(1) < late);
}

#[test]
fn pretraining_loss_moving_average_falls() {
    let mut b = common::toy();
    let cfg = PretrainConfig { steps: 600, ..PretrainConfig::default() };
    let losses = pretrain(&mut b, &cfg, |_, _| {}).unwrap();
    let windows: Vec<f32> = losses.chunks(100).map(|c| c.iter().sum::<f32>() / c.len() as f32).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "window means {windows:?}");
    }
    let ma = moving_average(&losses, 100);
    assert!(ma.last().unwrap() < &(ma[0] * 0.8), "moving average {} -> {}", ma[0], ma.last().unwrap());
}
