//! The diffusion-backend contract consumed by every pipeline stage, the
//! trainable toy backend, and the adapter for external checkpoints.

pub mod adapter;
pub mod pretrain;
pub mod schedule;
pub mod tokenizer;
pub mod toy;

pub use adapter::{CheckpointAdapter, CheckpointDescriptor, ExternalModel};
pub use pretrain::{pretrain, PretrainConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tokenizer::{WordPieceTokenizer, WordSpan};
pub use toy::{ToyBackend, ToyConfig, TrainExample};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::BinaryMask;
use crate::rng;
use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

/// A latent grid `[channel, row, col]` tagged with its diffusion timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Array3<f32>,
    pub timestep: usize,
    pub spatial_scale: usize,
}

impl LatentCode {
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    pub fn at(&self, timestep: usize) -> Self {
        Self { values: self.values.clone(), timestep, spatial_scale: self.spatial_scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Foreground,
    Background,
    Free,
}

pub const BACKGROUND_PROMPT: &str = "a photo of a background";

pub fn foreground_text(object: &str) -> String {
    format!("a photo of a {object}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub words: Vec<WordSpan>,
    /// Token positions of the object (or background) word.
    pub target_token_indices: Vec<usize>,
    pub role: PromptRole,
}

impl PromptSpec {
    fn build(backend: &dyn DiffusionBackend, text: &str, role: PromptRole, target: Option<&str>) -> Result<Self> {
        let (token_ids, words) = backend.tokenize(text)?;
        let target_token_indices = match target {
            Some(t) => {
                let t = t.to_lowercase();
                words
                    .iter()
                    .rev()
                    .find(|w| w.word == t)
                    .map(|w| w.positions.clone())
                    .ok_or_else(|| Error::Contract(format!("`{t}` not in prompt `{text}`")))?
            }
            None => words.last().map(|w| w.positions.clone()).unwrap_or_default(),
        };
        if target_token_indices.iter().any(|&i| i >= token_ids.len()) {
            return Err(Error::Contract("target token outside prompt".into()));
        }
        Ok(Self { text: text.to_string(), token_ids, words, target_token_indices, role })
    }

    /// `"a photo of a {object}"`, targeting the object word.
    pub fn foreground(backend: &dyn DiffusionBackend, object: &str) -> Result<Self> {
        Self::build(backend, &foreground_text(object), PromptRole::Foreground, Some(object))
    }

    /// `"a photo of a background"`.
    pub fn background(backend: &dyn DiffusionBackend) -> Result<Self> {
        Self::build(backend, BACKGROUND_PROMPT, PromptRole::Background, Some("background"))
    }

    /// Arbitrary text; targets the last word.
    pub fn free(backend: &dyn DiffusionBackend, text: &str) -> Result<Self> {
        Self::build(backend, text, PromptRole::Free, None)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Softmax attention of one head in one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub head_index: usize,
    /// `spatial positions × tokens`, each row sums to one.
    pub probabilities: Array2<f32>,
    pub spatial_shape: (usize, usize),
    pub timestep: usize,
    /// Monte-Carlo draw index within the timestep.
    pub draw: usize,
}

impl AttentionRecord {
    pub fn tokens(&self) -> usize {
        self.probabilities.ncols()
    }

    /// Column of one token reshaped to the layer's spatial grid.
    pub fn token_map(&self, token: usize) -> Array2<f32> {
        let (h, w) = self.spatial_shape;
        Array2::from_shape_fn((h, w), |(r, c)| self.probabilities[[r * w + c, token]])
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    /// Predicted noise, same shape as the input latent.
    pub predicted_update: Array3<f32>,
    pub attention_records: Vec<AttentionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Toy,
    CheckpointAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Native pixel resolution `(h, w)`.
    pub image_shape: (usize, usize),
    pub latent_channels: usize,
    pub spatial_scale: usize,
    pub schedule_length: usize,
    pub layer_resolutions: Vec<(usize, usize)>,
    pub heads: usize,
    pub tokenizer: String,
    /// Clamp range for the predicted clean latent during sampling.
    pub denoised_clip: Option<f32>,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.schedule_length == 0 {
            return Err(Error::Config("schedule length must be at least 1".into()));
        }
        if self.layer_resolutions.is_empty() {
            return Err(Error::Config("at least one cross-attention layer required".into()));
        }
        if self.spatial_scale == 0 || self.latent_channels == 0 || self.heads == 0 {
            return Err(Error::Config("zero-sized latent geometry".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.image_shape;
        (self.latent_channels, h / self.spatial_scale, w / self.spatial_scale)
    }

    /// Latent shape for an arbitrary image size.
    pub fn latent_shape_for(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let s = self.spatial_scale;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("{h}×{w} image not divisible by scale {s}")));
        }
        Ok((self.latent_channels, h / s, w / s))
    }
}

/// Classifier-free guidance with an explicit negative prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub scale: f32,
    pub positive: PromptSpec,
    pub negative: PromptSpec,
}

impl GuidanceSpec {
    pub fn new(scale: f32, positive: PromptSpec, negative: PromptSpec) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::Range("guidance scale must be finite".into()));
        }
        Ok(Self { scale, positive, negative })
    }

    /// Plain conditional sampling (`w = 1`); the negative branch is never evaluated.
    pub fn unguided(prompt: PromptSpec) -> Self {
        Self { scale: 1.0, negative: prompt.clone(), positive: prompt }
    }

    /// `w·ε_pos − (w − 1)·ε_neg`.
    pub fn combine(&self, eps_pos: &Array3<f32>, eps_neg: &Array3<f32>) -> Array3<f32> {
        combine_guidance(self.scale, eps_pos, eps_neg)
    }
}

pub fn combine_guidance(w: f32, eps_pos: &Array3<f32>, eps_neg: &Array3<f32>) -> Array3<f32> {
    let mut out = Array3::zeros(eps_pos.dim());
    Zip::from(&mut out)
        .and(eps_pos)
        .and(eps_neg)
        .for_each(|o, &f, &b| *o = w * f - (w - 1.0) * b);
    out
}

/// A text-conditioned latent denoiser with cross-attention capture.
///
/// Implementations must be deterministic and safe to call from several
/// threads at once; training happens outside this trait.
pub trait DiffusionBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn schedule(&self) -> &NoiseSchedule;

    fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)>;

    fn encode(&self, image: &Image) -> Result<LatentCode>;

    /// Linear decode; not clamped to the pixel range.
    fn decode(&self, z: &LatentCode) -> Result<Image>;

    /// Raw noise prediction for an already validated latent.
    fn predict_noise(&self, z: &LatentCode, prompt: &PromptSpec, capture_attention: bool) -> Result<DenoiseResult>;

    fn denoise_step(&self, z: &LatentCode, prompt: &PromptSpec, capture_attention: bool) -> Result<DenoiseResult> {
        if z.timestep == 0 {
            return Err(Error::Contract("denoise_step requires timestep >= 1".into()));
        }
        self.schedule().check(z.timestep)?;
        check_finite(&z.values)?;
        self.predict_noise(z, prompt, capture_attention)
    }

    /// Forward diffusion `sqrt(ab_t)·z0 + sqrt(1 − ab_t)·noise`; `t = 0` is the identity.
    fn add_noise(&self, z0: &LatentCode, t: usize, noise: &Array3<f32>) -> Result<LatentCode> {
        self.schedule().check(t)?;
        if noise.dim() != z0.values.dim() {
            return Err(Error::Shape(format!("noise {:?} vs latent {:?}", noise.dim(), z0.values.dim())));
        }
        if t == 0 {
            return Ok(z0.at(0));
        }
        let (a, b) = self.schedule().coefficients(t);
        let mut values = Array3::zeros(z0.values.dim());
        Zip::from(&mut values).and(&z0.values).and(noise).for_each(|o, &z, &n| *o = a * z + b * n);
        Ok(LatentCode { values, timestep: t, spatial_scale: z0.spatial_scale })
    }

    /// Regenerates the region where `mask` is set, keeping the rest of
    /// `z_masked`, and decodes to a `[0,1]` image.
    fn inpaint(&self, z_masked: &LatentCode, mask: &BinaryMask, prompt: &PromptSpec, seed: u64) -> Result<Image> {
        if mask.dims() != z_masked.spatial() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match latent {:?}",
                mask.dims(),
                z_masked.spatial()
            )));
        }
        if mask.count() == mask.values.len() {
            log::warn!("inpaint mask covers the whole latent; generating unconditionally on context");
        }
        let t_max = self.schedule().len();
        let mut rng = rng::rng(seed);
        let dim = z_masked.values.dim();
        let noise = Array3::from_shape_vec(dim, rng::normal_vec(&mut rng, dim.0 * dim.1 * dim.2))
            .expect("shape");
        let mut z = self.add_noise(&z_masked.at(0), t_max, &noise)?;
        for t in (1..=t_max).rev() {
            let fresh = Array3::from_shape_vec(dim, rng::normal_vec(&mut rng, dim.0 * dim.1 * dim.2))
                .expect("shape");
            let known = self.add_noise(&z_masked.at(0), t, &fresh)?;
            blend_known(&mut z.values, &known.values, mask);
            z.timestep = t;
            let eps = self.denoise_step(&z, prompt, false)?.predicted_update;
            z = ddim_step(self.schedule(), &z, &eps, self.descriptor().denoised_clip);
        }
        blend_known(&mut z.values, &z_masked.values, mask);
        Ok(self.decode(&z)?.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Deterministic DDIM sampling from seeded Gaussian noise.
    fn sample(&self, guidance: &GuidanceSpec, seed: u64) -> Result<Image> {
        let z = self.sample_latent(guidance, seed)?;
        Ok(self.decode(&z)?.mapv(|v| v.clamp(0.0, 1.0)))
    }

    fn sample_latent(&self, guidance: &GuidanceSpec, seed: u64) -> Result<LatentCode> {
        let d = self.descriptor();
        let (c, h, w) = d.latent_shape();
        let t_max = self.schedule().len();
        let mut rng = rng::rng(seed);
        let values = Array3::from_shape_vec((c, h, w), rng::normal_vec(&mut rng, c * h * w)).expect("shape");
        let mut z = LatentCode { values, timestep: t_max, spatial_scale: d.spatial_scale };
        for t in (1..=t_max).rev() {
            z.timestep = t;
            let eps_pos = self.denoise_step(&z, &guidance.positive, false)?.predicted_update;
            let eps = if guidance.scale == 1.0 {
                eps_pos
            } else {
                let eps_neg = self.denoise_step(&z, &guidance.negative, false)?.predicted_update;
                guidance.combine(&eps_pos, &eps_neg)
            };
            z = ddim_step(self.schedule(), &z, &eps, d.denoised_clip);
        }
        Ok(z)
    }
}

fn check_finite(values: &Array3<f32>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Overwrites cells where `mask` is false with `known`.
fn blend_known(z: &mut Array3<f32>, known: &Array3<f32>, mask: &BinaryMask) {
    let (c, h, w) = z.dim();
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if !mask.values[[r, col]] {
                    z[[ch, r, col]] = known[[ch, r, col]];
                }
            }
        }
    }
}

/// One deterministic DDIM update `z_t → z_{t−1}` (η = 0).
pub fn ddim_step(schedule: &NoiseSchedule, z: &LatentCode, eps: &Array3<f32>, clip: Option<f32>) -> LatentCode {
    let t = z.timestep;
    let (a_t, s_t) = schedule.coefficients(t);
    let (a_prev, s_prev) = schedule.coefficients(t - 1);
    let mut x0 = Array3::zeros(z.values.dim());
    Zip::from(&mut x0).and(&z.values).and(eps).for_each(|o, &zt, &e| {
        let v = (zt - s_t * e) / a_t;
        *o = match clip {
            Some(c) => v.clamp(-c, c),
            None => v,
        };
    });
    let mut next = Array3::zeros(z.values.dim());
    Zip::from(&mut next).and(&z.values).and(&x0).for_each(|o, &zt, &x| {
        let e = (zt - a_t * x) / s_t;
        *o = a_prev * x + s_prev * e;
    });
    LatentCode { values: next, timestep: t - 1, spatial_scale: z.spatial_scale }
}
