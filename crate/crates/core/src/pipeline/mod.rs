//! Dataset manifests, cached stage execution and evaluation reports.

pub mod config;
pub mod eval;
pub mod ingest;
pub mod manifest;
pub mod stages;

pub use config::{BackendKind, LabelSource, PipelineConfig, DEFAULT_CONFIG};
pub use eval::{evaluate, EvalReport};
pub use ingest::Layout;
pub use manifest::{Manifest, Record, Split};
pub use stages::{Pipeline, Stage, StageReport};
