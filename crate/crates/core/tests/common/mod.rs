#![allow(dead_code)]

pub mod oracles;

use distill_core::backend::{
    AttentionRecord, CheckpointAdapter, CheckpointDescriptor, DiffusionBackend, ExternalModel, LatentCode, PromptRole,
    PromptSpec, ToyBackend, ToyConfig, WordSpan,
};
use distill_core::imageio::Image;
use distill_core::toyshapes::{self, ShapeKind, ToyShapesConfig};
use distill_core::Result;
use ndarray::Array3;

pub fn toy() -> ToyBackend {
    ToyBackend::new(ToyConfig::default()).unwrap()
}

/// Engine that answers with a toy backend, so the adapter can be driven
/// without foreign weights.
pub struct ToyEngine(pub ToyBackend);

impl ExternalModel for ToyEngine {
    fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)> {
        self.0.tokenize(text)
    }

    fn pad_token(&self) -> usize {
        2
    }

    fn encode(&self, image: &Image) -> Result<Array3<f32>> {
        Ok(self.0.encode(image)?.values)
    }

    fn decode(&self, z: &Array3<f32>) -> Result<Image> {
        self.0.decode(&LatentCode { values: z.clone(), timestep: 0, spatial_scale: 4 })
    }

    fn predict_noise(
        &self,
        z: &Array3<f32>,
        timestep: usize,
        token_ids: &[usize],
        capture_attention: bool,
    ) -> Result<(Array3<f32>, Vec<AttentionRecord>)> {
        let prompt = PromptSpec {
            text: String::new(),
            token_ids: token_ids.to_vec(),
            words: Vec::new(),
            target_token_indices: Vec::new(),
            role: PromptRole::Free,
        };
        let z = LatentCode { values: z.clone(), timestep, spatial_scale: 4 };
        let r = self.0.predict_noise(&z, &prompt, capture_attention)?;
        Ok((r.predicted_update, r.attention_records))
    }
}

pub fn adapter_over(toy: ToyBackend) -> CheckpointAdapter {
    let d = toy.descriptor().clone();
    let ck = CheckpointDescriptor {
        checkpoint: "stub.ckpt".into(),
        tokenizer: d.tokenizer.clone(),
        image_size: d.image_shape.0,
        latent_channels: d.latent_channels,
        spatial_scale: d.spatial_scale,
        layers: d.layer_resolutions.clone(),
        heads: d.heads,
        token_length: 12,
        schedule: toy.schedule().config(),
        denoised_clip: d.denoised_clip,
    };
    CheckpointAdapter::new(ck).unwrap().with_engine(Box::new(ToyEngine(toy)))
}

pub fn shape_image(kind: ShapeKind, seed: u64) -> toyshapes::ToySample {
    toyshapes::render(&ToyShapesConfig::default(), kind, seed).unwrap()
}
