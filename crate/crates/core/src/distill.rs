//! Dual-objective fine-tuning (full-image synthesis under the object prompt,
//! background reconstruction under the background prompt), background-guided
//! sampling, and synthetic dataset generation.

use crate::backend::{DiffusionBackend, GuidanceSpec, LatentCode, PromptSpec, ToyBackend, TrainExample};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{BinaryMask, PatchRect};
use crate::maskgen::{self, PrelimConfig};
use crate::nn::Adam;
use crate::refine::{self, RefineConfig, RefineFlag};
use crate::rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectConstraints {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    /// Width / height bounds.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub max_tries: usize,
    /// Corners and sizes are multiples of this many pixels.
    pub align: usize,
}

impl Default for RectConstraints {
    fn default() -> Self {
        Self { min_area_fraction: 0.05, max_area_fraction: 0.4, min_aspect: 1.0 / 3.0, max_aspect: 3.0, max_tries: 100, align: 1 }
    }
}

impl RectConstraints {
    /// Every admissible `(height, width)` for an `h × w` grid.
    pub fn sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let a = self.align.max(1);
        let total = (h * w) as f64;
        let mut out = Vec::new();
        for rh in (a..=h).step_by(a) {
            for rw in (a..=w).step_by(a) {
                let frac = (rh * rw) as f64 / total;
                let aspect = rw as f64 / rh as f64;
                if frac >= self.min_area_fraction
                    && frac <= self.max_area_fraction
                    && aspect >= self.min_aspect - 1e-12
                    && aspect <= self.max_aspect + 1e-12
                {
                    out.push((rh, rw));
                }
            }
        }
        out
    }
}

fn foreground_sat(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let stride = w + 1;
    let mut sat = vec![0u32; (h + 1) * stride];
    for r in 0..h {
        let mut row = 0;
        for c in 0..w {
            row += mask.values[[r, c]] as u32;
            sat[(r + 1) * stride + c + 1] = sat[r * stride + c + 1] + row;
        }
    }
    (sat, stride)
}

/// Rejection-samples a rectangle free of foreground: a size is drawn
/// uniformly from the admissible sizes, then a position uniformly. Returns
/// the rectangle and the number of draws used.
pub fn sample_background_rect(mask: &BinaryMask, c: &RectConstraints, seed: u64) -> Result<(PatchRect, usize)> {
    let (h, w) = mask.dims();
    let sizes = c.sizes(h, w);
    if sizes.is_empty() {
        return Err(Error::Config(format!("no rectangle size satisfies {c:?} on {h}×{w}")));
    }
    let (sat, stride) = foreground_sat(mask);
    let a = c.align.max(1);
    let mut r = rng::rng(seed);
    for tries in 1..=c.max_tries {
        let (rh, rw) = sizes[r.random_range(0..sizes.len())];
        let top = r.random_range(0..=(h - rh) / a) * a;
        let left = r.random_range(0..=(w - rw) / a) * a;
        let (b, rt) = (top + rh, left + rw);
        let fg = sat[b * stride + rt] + sat[top * stride + left] - sat[top * stride + rt] - sat[b * stride + left];
        if fg == 0 {
            return Ok((PatchRect::new(top, left, rh, rw), tries));
        }
    }
    Err(Error::NoValidRect { tries: c.max_tries })
}

/// `w·ε(z, positive) − (w − 1)·ε(z, negative)`; the negative branch is
/// skipped at `w = 1`.
pub fn guided_update(backend: &dyn DiffusionBackend, z_t: &LatentCode, spec: &GuidanceSpec) -> Result<Array3<f32>> {
    let eps_f = backend.denoise_step(z_t, &spec.positive, false)?.predicted_update;
    if spec.scale == 1.0 {
        return Ok(eps_f);
    }
    let eps_b = backend.denoise_step(z_t, &spec.negative, false)?.predicted_update;
    Ok(spec.combine(&eps_f, &eps_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Foreground,
    Background,
}

/// Fine-tuning alternates objectives: even steps foreground, odd steps background.
pub fn objective_at(step: usize) -> Objective {
    if step % 2 == 0 {
        Objective::Foreground
    } else {
        Objective::Background
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub max_grad_norm: f32,
    pub rect: RectConstraints,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            learning_rate: 5e-4,
            max_grad_norm: 1.0,
            rect: RectConstraints { align: 4, ..RectConstraints::default() },
            seed: 2027,
        }
    }
}

/// One training image with its object word and upsampled preliminary mask.
#[derive(Debug, Clone)]
pub struct FinetuneRecord {
    pub image: Image,
    pub object: String,
    /// Pixel-space preliminary mask; `None` excludes the record from the
    /// background objective.
    pub prelim_up: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub objective: Objective,
    pub loss: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneReport {
    pub log: Vec<TrainLogRecord>,
    /// Background draws abandoned because no rectangle fit.
    pub skipped_no_rect: usize,
}

impl FinetuneReport {
    pub fn losses(&self, objective: Objective) -> Vec<f32> {
        self.log.iter().filter(|r| r.objective == objective).map(|r| r.loss).collect()
    }
}

/// Latent-resolution 0/1 weights covering the rectangle's footprint.
pub fn latent_footprint(rect: &PatchRect, scale: usize, h: usize, w: usize) -> Array2<f32> {
    let (t, l) = (rect.top / scale, rect.left / scale);
    let (b, r) = (rect.bottom() / scale, rect.right() / scale);
    Array2::from_shape_fn((h, w), |(i, j)| if i >= t && i < b && j >= l && j < r { 1.0 } else { 0.0 })
}

fn noise_like(r: &mut impl Rng, dim: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_vec(dim, rng::normal_vec(r, dim.0 * dim.1 * dim.2)).expect("shape")
}

/// Builds the background example: the whole noised latent goes in, the
/// denoising loss only covers the latent cells under the rectangle.
pub fn background_example(
    backend: &ToyBackend,
    record: &FinetuneRecord,
    rect: &PatchRect,
    seed: u64,
) -> Result<TrainExample> {
    let scale = backend.descriptor().spatial_scale;
    if rect.top % scale != 0 || rect.left % scale != 0 || rect.height % scale != 0 || rect.width % scale != 0 {
        return Err(Error::Contract(format!("rectangle {rect:?} not aligned to latent cells")));
    }
    let z0 = backend.encode(&record.image)?.values;
    let (_, h, w) = z0.dim();
    let mut r = rng::rng(seed);
    let timestep = r.random_range(1..=backend.schedule().len());
    let noise = noise_like(&mut r, z0.dim());
    let token_ids = PromptSpec::background(backend)?.token_ids;
    Ok(TrainExample { z0, token_ids, timestep, noise, loss_mask: Some(latent_footprint(rect, scale, h, w)) })
}

pub fn foreground_example(backend: &ToyBackend, record: &FinetuneRecord, seed: u64) -> Result<TrainExample> {
    let z0 = backend.encode(&record.image)?.values;
    let mut r = rng::rng(seed);
    let timestep = r.random_range(1..=backend.schedule().len());
    let noise = noise_like(&mut r, z0.dim());
    let token_ids = PromptSpec::foreground(backend, &record.object)?.token_ids;
    Ok(TrainExample { z0, token_ids, timestep, noise, loss_mask: None })
}

/// Fine-tunes in place with strictly alternating objectives.
pub fn finetune(
    backend: &mut ToyBackend,
    records: &[FinetuneRecord],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(&TrainLogRecord),
) -> Result<FinetuneReport> {
    if cfg.steps > 0 && cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning set".into()));
    }
    let bg_pool: Vec<usize> = (0..records.len()).filter(|&i| records[i].prelim_up.is_some()).collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut report = FinetuneReport::default();
    for step in 0..cfg.steps {
        let objective = objective_at(step);
        let step_seed = rng::derive_seed(cfg.seed, &[rng::tag("finetune"), step as u64]);
        let mut r = rng::rng(step_seed);
        let mut batch = Vec::with_capacity(cfg.batch);
        for slot in 0..cfg.batch {
            let ex_seed = rng::derive_seed(step_seed, &[slot as u64]);
            match objective {
                Objective::Foreground => {
                    let rec = &records[r.random_range(0..records.len())];
                    batch.push(foreground_example(backend, rec, ex_seed)?);
                }
                Objective::Background => {
                    if bg_pool.is_empty() {
                        report.skipped_no_rect += 1;
                        continue;
                    }
                    let rec = &records[bg_pool[r.random_range(0..bg_pool.len())]];
                    let mask = rec.prelim_up.as_ref().expect("pool members have masks");
                    match sample_background_rect(mask, &cfg.rect, rng::derive_seed(ex_seed, &[rng::tag("rect")])) {
                        Ok((rect, _)) => batch.push(background_example(backend, rec, &rect, ex_seed)?),
                        Err(Error::NoValidRect { .. }) => report.skipped_no_rect += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        let loss = if batch.is_empty() { f32::NAN } else { backend.train_batch(&batch, &mut opt, cfg.max_grad_norm)? };
        let entry = TrainLogRecord { step, objective, loss, seed: step_seed };
        on_step(&entry);
        report.log.push(entry);
    }
    Ok(report)
}

/// Moving average over windows of `window` consecutive values.
pub fn moving_average(values: &[f32], window: usize) -> Vec<f32> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f32>() / window as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Guidance scale for the object images (1 = plain conditional sampling).
    pub guidance_scale: f32,
    pub prelim: PrelimConfig,
    pub refine: RefineConfig,
    /// Gray level behind extracted foregrounds.
    pub fill: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { guidance_scale: 1.0, prelim: PrelimConfig::default(), refine: RefineConfig::default(), fill: 0.5 }
    }
}

/// One synthetic sample: object image, its mask and cut-out, and a
/// background-only image drawn from the same seed family.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub index: usize,
    pub seed: u64,
    pub object: String,
    pub image: Image,
    pub mask: BinaryMask,
    pub foreground: Image,
    pub background: Image,
    pub flags: Vec<RefineFlag>,
    /// Degenerate samples are kept for inspection but excluded from training.
    pub degenerate: bool,
}

pub fn composite_foreground(image: &Image, mask: &BinaryMask, fill: f32) -> Image {
    let mut out = image.clone();
    for ((_, r, c), v) in out.indexed_iter_mut() {
        if !mask.values[[r, c]] {
            *v = fill;
        }
    }
    out
}

/// Generates sample `index` of the synthetic set.
pub fn synthesize_one(
    backend: &dyn DiffusionBackend,
    object: &str,
    index: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<SyntheticSample> {
    let s = rng::derive_seed(seed, &[rng::tag("synth"), index as u64]);
    let fg = PromptSpec::foreground(backend, object)?;
    let bg = PromptSpec::background(backend)?;
    let guidance = GuidanceSpec::new(cfg.guidance_scale, fg.clone(), bg.clone())?;
    let image = backend.sample(&guidance, rng::derive_seed(s, &[rng::tag("object")]))?;
    let background = backend.sample(&GuidanceSpec::unguided(bg.clone()), rng::derive_seed(s, &[rng::tag("background")]))?;
    let prelim = maskgen::preliminary_mask(backend, &image, &fg, &cfg.prelim, rng::derive_seed(s, &[rng::tag("prelim")]))?;
    let refined = refine::refined_mask(backend, &image, &prelim.mask, &bg, rng::derive_seed(s, &[rng::tag("refine")]), &cfg.refine)?;
    let mut flags = refined.flags.clone();
    flags.sort();
    flags.dedup();
    let degenerate = refined.mask.is_empty();
    let foreground = composite_foreground(&image, &refined.mask, cfg.fill);
    Ok(SyntheticSample {
        index,
        seed: s,
        object: object.to_string(),
        image,
        mask: refined.mask,
        foreground,
        background,
        flags,
        degenerate,
    })
}
