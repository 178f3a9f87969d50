//! Foreground/background concept distillation from a text-conditioned
//! latent diffusion denoiser.

pub mod backend;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod imageio;
pub mod mask;
pub mod maskgen;
pub mod nn;
pub mod pipeline;
pub mod probe;
pub mod refine;
pub mod rng;
pub mod segnet;
pub mod toyshapes;

pub use error::{Error, Result};
