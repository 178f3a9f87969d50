//! Procedural single-object images: one flat, saturated shape on a muted,
//! softly textured background, with the exact mask it was rendered from.

use crate::error::{Error, Result};
use crate::imageio::{quantize, Image};
use crate::mask::{BinaryMask, PatchRect, Provenance, ResolutionSpace};
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f32::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [Self::Circle, Self::Square, Self::Triangle, Self::Diamond, Self::Ring, Self::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Diamond => "diamond",
            Self::Ring => "ring",
            Self::Cross => "cross",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == word)
    }

    fn color(self) -> [f32; 3] {
        match self {
            Self::Circle => [0.86, 0.14, 0.12],
            Self::Square => [0.12, 0.24, 0.90],
            Self::Triangle => [0.92, 0.84, 0.10],
            Self::Diamond => [0.84, 0.12, 0.80],
            Self::Ring => [0.10, 0.78, 0.20],
            Self::Cross => [0.10, 0.80, 0.86],
        }
    }

    /// Shape area for unit "radius".
    fn unit_area(self) -> f32 {
        match self {
            Self::Circle => PI,
            Self::Square => 4.0 * 0.8 * 0.8,
            Self::Triangle => 3.0 * 3f32.sqrt() / 4.0,
            Self::Diamond => 2.0,
            Self::Ring => PI * (1.0 - 0.55 * 0.55),
            Self::Cross => 2.0 * 2.0 * 0.35 * 2.0 - (2.0 * 0.35) * (2.0 * 0.35),
        }
    }

    /// Point test in shape-local coordinates scaled by the radius.
    fn contains(self, x: f32, y: f32) -> bool {
        match self {
            Self::Circle => x * x + y * y <= 1.0,
            Self::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            // Equilateral, circumradius 1, apex up.
            Self::Triangle => (-0.5..=1.0).contains(&y) && x.abs() <= (1.0 - y) / 1.5 * (3f32.sqrt() / 2.0),
            Self::Diamond => x.abs() + y.abs() <= 1.0,
            Self::Ring => {
                let d = x * x + y * y;
                (0.55 * 0.55..=1.0).contains(&d)
            }
            Self::Cross => (x.abs() <= 0.35 && y.abs() <= 1.0) || (y.abs() <= 0.35 && x.abs() <= 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyShapesConfig {
    pub image_size: usize,
    pub kinds: Vec<ShapeKind>,
    pub min_fg_fraction: f32,
    pub max_fg_fraction: f32,
    /// Amplitude of the low-frequency background waves.
    pub texture_amplitude: f32,
    /// Amplitude of per-pixel background noise.
    pub noise_amplitude: f32,
    pub color_jitter: f32,
}

impl Default for ToyShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            kinds: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond],
            min_fg_fraction: 0.05,
            max_fg_fraction: 0.5,
            texture_amplitude: 0.06,
            noise_amplitude: 0.03,
            color_jitter: 0.06,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: Image,
    pub mask: BinaryMask,
    pub kind: ShapeKind,
    pub bbox: PatchRect,
}

/// Muted textured background, already in `[0, 1]`.
pub fn render_background(cfg: &ToyShapesConfig, r: &mut ChaCha8Rng) -> Image {
    let n = cfg.image_size;
    let lum = r.random_range(0.35f32..0.65);
    let tint: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.06f32..0.06));
    let waves: Vec<(f32, f32, f32, f32)> = (0..2)
        .map(|_| {
            let angle = r.random_range(0.0..PI);
            let freq = r.random_range(0.5f32..2.0) * 2.0 * PI / n as f32;
            (angle.cos() * freq, angle.sin() * freq, r.random_range(0.0..2.0 * PI), cfg.texture_amplitude)
        })
        .collect();
    let mut img = Image::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let wave: f32 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x as f32 + ky * y as f32 + ph).sin()).sum();
            for (c, t) in tint.iter().enumerate() {
                let noise = if cfg.noise_amplitude > 0.0 {
                    r.random_range(-cfg.noise_amplitude..cfg.noise_amplitude)
                } else {
                    0.0
                };
                img[[c, y, x]] = (lum + t + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn rasterize(kind: ShapeKind, n: usize, cx: f32, cy: f32, radius: f32) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(y, x)| {
        // Image y grows downward; shape-local y grows upward.
        let lx = (x as f32 + 0.5 - cx) / radius;
        let ly = (cy - (y as f32 + 0.5)) / radius;
        kind.contains(lx, ly)
    })
}

/// Renders one sample. Deterministic in `seed`; the image is 8-bit quantized
/// so it survives a PNG round trip unchanged.
pub fn render(cfg: &ToyShapesConfig, kind: ShapeKind, seed: u64) -> Result<ToySample> {
    let n = cfg.image_size;
    if n < 8 || !(0.0 < cfg.min_fg_fraction && cfg.min_fg_fraction < cfg.max_fg_fraction && cfg.max_fg_fraction < 1.0) {
        return Err(Error::Config(format!("invalid toy shape config {cfg:?}")));
    }
    let mut r = rng::rng(seed);
    let total = (n * n) as f32;
    for _ in 0..1000 {
        let frac = r.random_range(cfg.min_fg_fraction..cfg.max_fg_fraction);
        let radius = (frac * total / kind.unit_area()).sqrt();
        if 2.0 * radius >= n as f32 - 1.0 {
            continue;
        }
        let cx = r.random_range(radius..n as f32 - radius);
        let cy = r.random_range(radius..n as f32 - radius);
        let values = rasterize(kind, n, cx, cy, radius);
        let count = values.iter().filter(|&&v| v).count() as f32;
        let actual = count / total;
        if actual < cfg.min_fg_fraction || actual > cfg.max_fg_fraction {
            continue;
        }
        let base = kind.color();
        let color: [f32; 3] =
            std::array::from_fn(|c| (base[c] + r.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0));
        let mut image = render_background(cfg, &mut r);
        for ((y, x), &v) in values.indexed_iter() {
            if v {
                for (c, &col) in color.iter().enumerate() {
                    image[[c, y, x]] = col;
                }
            }
        }
        let mask = BinaryMask::new(values, ResolutionSpace::Pixel, Provenance::GroundTruth);
        let bbox = mask.bbox().expect("non-empty shape");
        return Ok(ToySample { image: quantize(&image), mask, kind, bbox });
    }
    Err(Error::Numerical(format!("could not place a {} within the area band", kind.word())))
}

/// Background-only image for the same texture family.
pub fn render_empty(cfg: &ToyShapesConfig, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    quantize(&render_background(cfg, &mut r))
}

/// The `index`-th sample of a dataset: kinds cycle deterministically.
pub fn dataset_sample(cfg: &ToyShapesConfig, seed: u64, index: usize) -> Result<ToySample> {
    if cfg.kinds.is_empty() {
        return Err(Error::Config("no shape kinds configured".into()));
    }
    let kind = cfg.kinds[index % cfg.kinds.len()];
    render(cfg, kind, rng::derive_seed(seed, &[rng::tag("toyshapes"), index as u64]))
}
