//! Foundation training of the toy backend on an open-ended stream of
//! procedurally generated images. This stands in for the large generic
//! text-to-image model the pipeline starts from, so it sees shape images
//! captioned with their kind and background-only images captioned as
//! backgrounds, never the dataset being segmented.

use super::toy::{ToyBackend, TrainExample};
use super::{foreground_text, DiffusionBackend, BACKGROUND_PROMPT};
use crate::error::Result;
use crate::nn::Adam;
use crate::rng;
use crate::toyshapes::{self, ToyShapesConfig};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    /// Share of background-only images in the stream.
    pub background_fraction: f32,
    pub max_grad_norm: f32,
    pub seed: u64,
    pub shapes: ToyShapesConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 8,
            learning_rate: 2e-3,
            background_fraction: 0.5,
            max_grad_norm: 1.0,
            seed: 1009,
            shapes: ToyShapesConfig::default(),
        }
    }
}

/// Draws one training example from the stream.
pub fn stream_example(backend: &ToyBackend, cfg: &PretrainConfig, step: usize, slot: usize) -> Result<TrainExample> {
    let seed = rng::derive_seed(cfg.seed, &[rng::tag("pretrain"), step as u64, slot as u64]);
    let mut r = rng::rng(seed);
    let (image, text) = if r.random::<f32>() < cfg.background_fraction {
        (toyshapes::render_empty(&cfg.shapes, r.random()), BACKGROUND_PROMPT.to_string())
    } else {
        let kind = cfg.shapes.kinds[r.random_range(0..cfg.shapes.kinds.len())];
        (toyshapes::render(&cfg.shapes, kind, r.random())?.image, foreground_text(kind.word()))
    };
    let z0 = backend.encode(&image)?.values;
    let (token_ids, _) = backend.tokenize(&text)?;
    let timestep = r.random_range(1..=backend.schedule().len());
    let dim = z0.dim();
    let noise = Array3::from_shape_vec(dim, rng::normal_vec(&mut r, dim.0 * dim.1 * dim.2)).expect("shape");
    Ok(TrainExample { z0, token_ids, timestep, noise, loss_mask: None })
}

/// Trains in place; returns the per-step mean loss.
pub fn pretrain(backend: &mut ToyBackend, cfg: &PretrainConfig, mut on_step: impl FnMut(usize, f32)) -> Result<Vec<f32>> {
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|slot| stream_example(backend, cfg, step, slot))
            .collect::<Result<Vec<_>>>()?;
        let loss = backend.train_batch(&batch, &mut opt, cfg.max_grad_norm)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}
