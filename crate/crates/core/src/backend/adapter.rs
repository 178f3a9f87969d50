//! Adapter for externally hosted latent-diffusion checkpoints.
//!
//! The descriptor file is plain `key = value` text:
//!
//! ```text
//! checkpoint = /models/ldm-text2img/model.ckpt
//! tokenizer = bert-base-uncased
//! image_size = 256
//! latent_channels = 4
//! spatial_scale = 4
//! layers = 64x64, 32x32, 16x16, 8x8
//! heads = 8
//! token_length = 77
//! schedule_steps = 50
//! ```
//!
//! The crate does not run foreign weights itself. A host program supplies an
//! [`ExternalModel`] engine; without one every model call fails with
//! `BackendNotReady`. The adapter pads prompts to the fixed token length and
//! checks every engine output against the descriptor, so downstream stages see
//! the same contract as with the toy backend.

use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::{AttentionRecord, BackendDescriptor, BackendKind, DenoiseResult, DiffusionBackend, LatentCode, PromptSpec, WordSpan};
use crate::error::{Error, Result};
use crate::imageio::Image;
use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDescriptor {
    pub checkpoint: PathBuf,
    pub tokenizer: String,
    pub image_size: usize,
    pub latent_channels: usize,
    pub spatial_scale: usize,
    pub layers: Vec<(usize, usize)>,
    pub heads: usize,
    pub token_length: usize,
    pub schedule: ScheduleConfig,
    pub denoised_clip: Option<f32>,
}

impl Default for CheckpointDescriptor {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            tokenizer: "bert-base-uncased".into(),
            image_size: 256,
            latent_channels: 4,
            spatial_scale: 4,
            layers: vec![(64, 64), (32, 32), (16, 16), (8, 8)],
            heads: 8,
            token_length: 77,
            schedule: ScheduleConfig { steps: 50, beta_start: 8.5e-4, beta_end: 1.2e-2 },
            denoised_clip: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_layers(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| Error::Config(format!("layer `{s}` is not HxW")))?;
            Ok((parse_num("layers", h.trim())?, parse_num("layers", w.trim())?))
        })
        .collect()
}

impl CheckpointDescriptor {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut d = Self::default();
        for (k, v) in &kv {
            match k.as_str() {
                "checkpoint" => d.checkpoint = PathBuf::from(v),
                "tokenizer" => d.tokenizer = v.clone(),
                "image_size" => d.image_size = parse_num(k, v)?,
                "latent_channels" => d.latent_channels = parse_num(k, v)?,
                "spatial_scale" => d.spatial_scale = parse_num(k, v)?,
                "layers" => d.layers = parse_layers(v)?,
                "heads" => d.heads = parse_num(k, v)?,
                "token_length" => d.token_length = parse_num(k, v)?,
                "schedule_steps" => d.schedule.steps = parse_num(k, v)?,
                "beta_start" => d.schedule.beta_start = parse_num(k, v)?,
                "beta_end" => d.schedule.beta_end = parse_num(k, v)?,
                "denoised_clip" => d.denoised_clip = Some(parse_num(k, v)?),
                other => return Err(Error::Config(format!("unknown descriptor key `{other}`"))),
            }
        }
        if !kv.contains_key("checkpoint") {
            return Err(Error::Config("descriptor must name a checkpoint".into()));
        }
        d.backend_descriptor()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        let mut s = format!(
            "checkpoint = {}\ntokenizer = {}\nimage_size = {}\nlatent_channels = {}\nspatial_scale = {}\n\
             layers = {}\nheads = {}\ntoken_length = {}\nschedule_steps = {}\nbeta_start = {}\nbeta_end = {}\n",
            self.checkpoint.display(),
            self.tokenizer,
            self.image_size,
            self.latent_channels,
            self.spatial_scale,
            layers.join(", "),
            self.heads,
            self.token_length,
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        );
        if let Some(c) = self.denoised_clip {
            s.push_str(&format!("denoised_clip = {c}\n"));
        }
        s
    }

    pub fn backend_descriptor(&self) -> Result<BackendDescriptor> {
        if self.token_length == 0 {
            return Err(Error::Config("token_length must be positive".into()));
        }
        if self.spatial_scale == 0 || self.image_size % self.spatial_scale != 0 {
            return Err(Error::Config("image_size must be divisible by spatial_scale".into()));
        }
        let d = BackendDescriptor {
            kind: BackendKind::CheckpointAdapter,
            image_shape: (self.image_size, self.image_size),
            latent_channels: self.latent_channels,
            spatial_scale: self.spatial_scale,
            schedule_length: self.schedule.steps,
            layer_resolutions: self.layers.clone(),
            heads: self.heads,
            tokenizer: self.tokenizer.clone(),
            denoised_clip: self.denoised_clip,
        };
        d.validate()?;
        Ok(d)
    }
}

/// The inference engine behind a checkpoint. Implementations must be
/// deterministic and thread-safe.
pub trait ExternalModel: Send + Sync {
    /// Unpadded token ids (including any start token) and word spans.
    fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)>;
    fn pad_token(&self) -> usize;
    fn encode(&self, image: &Image) -> Result<Array3<f32>>;
    fn decode(&self, z: &Array3<f32>) -> Result<Image>;
    /// Noise prediction and, if requested, one attention record per layer and head.
    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        token_ids: &[usize],
        capture_attention: bool,
    ) -> Result<(Array3<f32>, Vec<AttentionRecord>)>;
}

pub struct CheckpointAdapter {
    checkpoint: CheckpointDescriptor,
    descriptor: BackendDescriptor,
    schedule: NoiseSchedule,
    engine: Option<Box<dyn ExternalModel>>,
}

impl std::fmt::Debug for CheckpointAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointAdapter")
            .field("checkpoint", &self.checkpoint)
            .field("engine", &self.engine.is_some())
            .finish()
    }
}

impl CheckpointAdapter {
    pub fn new(checkpoint: CheckpointDescriptor) -> Result<Self> {
        let descriptor = checkpoint.backend_descriptor()?;
        let schedule = NoiseSchedule::new(checkpoint.schedule)?;
        Ok(Self { checkpoint, descriptor, schedule, engine: None })
    }

    pub fn with_engine(mut self, engine: Box<dyn ExternalModel>) -> Self {
        self.engine = Some(engine);
        self
    }

    pub fn checkpoint(&self) -> &CheckpointDescriptor {
        &self.checkpoint
    }

    fn engine(&self) -> Result<&dyn ExternalModel> {
        self.engine.as_deref().ok_or_else(|| {
            Error::BackendNotReady(format!("no engine attached for {}", self.checkpoint.checkpoint.display()))
        })
    }
}

impl DiffusionBackend for CheckpointAdapter {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)> {
        let engine = self.engine()?;
        let (mut ids, spans) = engine.tokenize(text)?;
        let len = self.checkpoint.token_length;
        if ids.len() > len {
            return Err(Error::Contract(format!("prompt has {} tokens, limit {len}", ids.len())));
        }
        ids.resize(len, engine.pad_token());
        Ok((ids, spans))
    }

    fn encode(&self, image: &Image) -> Result<LatentCode> {
        let (_, h, w) = image.dim();
        let shape = self.descriptor.latent_shape_for(h, w)?;
        let values = self.engine()?.encode(image)?;
        if values.dim() != shape {
            return Err(Error::Shape(format!("engine latent {:?}, expected {shape:?}", values.dim())));
        }
        Ok(LatentCode { values, timestep: 0, spatial_scale: self.descriptor.spatial_scale })
    }

    fn decode(&self, z: &LatentCode) -> Result<Image> {
        let img = self.engine()?.decode(&z.values)?;
        let (_, h, w) = z.values.dim();
        let s = self.descriptor.spatial_scale;
        if img.dim() != (3, h * s, w * s) {
            return Err(Error::Shape(format!("engine image {:?}", img.dim())));
        }
        Ok(img)
    }

    fn predict_noise(&self, z: &LatentCode, prompt: &PromptSpec, capture_attention: bool) -> Result<DenoiseResult> {
        if prompt.token_ids.len() != self.checkpoint.token_length {
            return Err(Error::Contract("prompt was not tokenized by this adapter".into()));
        }
        let (eps, records) = self.engine()?.predict_noise(&z.values, z.timestep, &prompt.token_ids, capture_attention)?;
        if eps.dim() != z.values.dim() {
            return Err(Error::Shape(format!("engine prediction {:?}", eps.dim())));
        }
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if capture_attention {
            let expected = self.descriptor.layer_resolutions.len() * self.descriptor.heads;
            if records.len() != expected {
                return Err(Error::Contract(format!("{} attention records, expected {expected}", records.len())));
            }
            for r in &records {
                let shape = self.descriptor.layer_resolutions.get(r.layer_index).copied();
                if shape != Some(r.spatial_shape)
                    || r.probabilities.dim() != (r.spatial_shape.0 * r.spatial_shape.1, prompt.token_ids.len())
                {
                    return Err(Error::Contract(format!("attention record for layer {} has wrong shape", r.layer_index)));
                }
            }
        }
        let attention_records = if capture_attention { records } else { Vec::new() };
        Ok(DenoiseResult { predicted_update: eps, attention_records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_text_roundtrip() {
        let text = "# sd-like\ncheckpoint = /m/x.ckpt\nlayers = 64x64, 32x32\nheads = 4\n";
        let d = CheckpointDescriptor::parse(text).unwrap();
        assert_eq!(d.layers, vec![(64, 64), (32, 32)]);
        assert_eq!(d.heads, 4);
        assert_eq!(d.token_length, 77);
        assert_eq!(CheckpointDescriptor::parse(&d.to_text()).unwrap(), d);
        assert_eq!(d.backend_descriptor().unwrap().latent_shape(), (4, 64, 64));
    }

    #[test]
    fn descriptor_rejects_bad_input() {
        assert!(CheckpointDescriptor::parse("layers = 64x64").is_err());
        assert!(CheckpointDescriptor::parse("checkpoint = a\nlayers = 64").is_err());
        assert!(CheckpointDescriptor::parse("checkpoint = a\nbogus = 1").is_err());
        assert!(CheckpointDescriptor::parse("checkpoint = a\nlayers =").is_err());
    }

    #[test]
    fn missing_engine_is_not_ready() {
        let a = CheckpointAdapter::new(CheckpointDescriptor::parse("checkpoint = x").unwrap()).unwrap();
        let img = Image::zeros((3, 256, 256));
        assert!(matches!(a.encode(&img), Err(Error::BackendNotReady(_))));
        assert!(matches!(a.tokenize("a photo of a bird"), Err(Error::BackendNotReady(_))));
    }
}
