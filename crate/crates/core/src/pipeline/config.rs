//! Pipeline configuration: one TOML file with a section per stage.

use crate::backend::{PretrainConfig, ToyConfig};
use crate::distill::{FinetuneConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::maskgen::PrelimConfig;
use crate::refine::RefineConfig;
use crate::segnet::SegTrainConfig;
use crate::toyshapes::ToyShapesConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Checkpoint,
}

/// Which masks a segmenter is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Upsampled preliminary masks of the training split.
    Prelim,
    /// Refined masks of the training split.
    Refined,
    /// Refined masks plus the synthetic image/mask pairs.
    Augmented,
}

impl LabelSource {
    pub fn name(self) -> &'static str {
        match self {
            LabelSource::Prelim => "prelim",
            LabelSource::Refined => "refined",
            LabelSource::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralSection {
    pub dataset: String,
    /// Output root; the manifest lives at `<output>/manifest.ndjson` unless
    /// `--manifest` says otherwise. Relative paths resolve against the config file.
    pub output: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub test_fraction: f64,
}

impl Default for GeneralSection {
    fn default() -> Self {
        Self { dataset: "toy-shapes".into(), output: "out".into(), seed: 0, workers: 1, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Checkpoint descriptor file, used when `kind = "checkpoint"`.
    pub descriptor: Option<PathBuf>,
    pub toy: ToyConfig,
    pub pretrain: PretrainConfig,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self { kind: BackendKind::Toy, descriptor: None, toy: ToyConfig::default(), pretrain: PretrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Overrides every record's object word when set.
    pub object: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: usize,
    pub guidance_scale: f32,
    pub fill: f32,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self { count: 200, guidance_scale: s.guidance_scale, fill: s.fill, seed: 77 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegtrainSection {
    pub variants: Vec<LabelSource>,
    pub train: SegTrainConfig,
}

impl Default for SegtrainSection {
    fn default() -> Self {
        Self {
            variants: vec![LabelSource::Prelim, LabelSource::Refined, LabelSource::Augmented],
            train: SegTrainConfig { steps: 4000, ..SegTrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub target_tpr: f64,
    /// Training-split images used to pick the TPR threshold.
    pub holdout: usize,
    pub fid_dim: usize,
    pub fid_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { target_tpr: 0.95, holdout: 100, fid_dim: 16, fid_seed: 31 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToysetSection {
    pub count: usize,
    pub seed: u64,
    pub shapes: ToyShapesConfig,
}

impl Default for ToysetSection {
    fn default() -> Self {
        Self { count: 500, seed: 99, shapes: ToyShapesConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub general: GeneralSection,
    pub backend: BackendSection,
    pub prompt: PromptSection,
    pub prelim: PrelimConfig,
    pub finetune: FinetuneConfig,
    pub refine: RefineConfig,
    pub synth: SynthSection,
    pub segtrain: SegtrainSection,
    pub eval: EvalSection,
    pub toyset: ToysetSection,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative `output` and `descriptor` paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.general.output.is_relative() {
            cfg.general.output = base.join(&cfg.general.output);
        }
        if let Some(d) = &cfg.backend.descriptor {
            if d.is_relative() {
                cfg.backend.descriptor = Some(base.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.general.workers == 0 {
            return bad("general.workers must be at least 1");
        }
        if !(0.0..1.0).contains(&self.general.test_fraction) {
            return bad("general.test_fraction must lie in [0, 1)");
        }
        if self.backend.kind == BackendKind::Checkpoint && self.backend.descriptor.is_none() {
            return bad("backend.descriptor is required for checkpoint backends");
        }
        if self.prelim.draws == 0 || self.prelim.t0 == 0 {
            return bad("prelim.t0 and prelim.draws must be positive");
        }
        if self.finetune.batch == 0 {
            return bad("finetune.batch must be positive");
        }
        if !self.synth.guidance_scale.is_finite() {
            return bad("synth.guidance_scale must be finite");
        }
        if !(0.0..=1.0).contains(&self.eval.target_tpr) || self.eval.fid_dim == 0 {
            return bad("eval.target_tpr must lie in [0, 1] and eval.fid_dim must be positive");
        }
        if self.toyset.count == 0 {
            return bad("toyset.count must be positive");
        }
        self.segtrain.train.validate()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            guidance_scale: self.synth.guidance_scale,
            fill: self.synth.fill,
            prelim: self.prelim,
            refine: self.refine,
        }
    }
}

/// The default configuration, with every knob spelled out and explained.
pub const DEFAULT_CONFIG: &str = r#"# Foreground/background distillation pipeline configuration.
# Every value below is the built-in default; delete lines to keep them.

[general]
dataset = "toy-shapes"
# Output root; relative to this file.
output = "out"
# Mixed into every stage seed. Same config + seed => identical artifacts.
seed = 0
# Worker threads for per-record stages.
workers = 1
# Fraction of ingested records assigned to the test split.
test_fraction = 0.2

[backend]
# "toy" trains a small denoiser on procedural shapes; "checkpoint" wraps an
# external latent-diffusion model described by `descriptor`.
kind = "toy"
# descriptor = "model.ckpt.txt"

[backend.toy]
image_size = 64
spatial_scale = 4
latent_channels = 4
width1 = 16
width2 = 32
heads = 2
head_dim = 8
time_dim = 32
embed_dim = 16
# Clip on the predicted clean latent inside DDIM updates.
denoised_clip = 1.0
init_seed = 17

[backend.toy.schedule]
# Linear beta schedule.
steps = 50
beta_start = 0.0015
beta_end = 0.2

[backend.pretrain]
# Foundation training on procedural captioned shapes; runs once, then cached.
steps = 6000
batch = 8
learning_rate = 0.002
# Share of images that show only background, captioned with the background prompt.
background_fraction = 0.5
max_grad_norm = 1.0
seed = 1009

[backend.pretrain.shapes]
image_size = 64
kinds = ["circle", "square", "triangle", "diamond"]
min_fg_fraction = 0.05
max_fg_fraction = 0.5
texture_amplitude = 0.06
noise_amplitude = 0.03
color_jitter = 0.06

[prompt]
# Uncomment to prompt every image with the same object word.
# object = "bird"

[prelim]
# Noise level the attention probe starts from, and Monte-Carlo draws per step.
t0 = 40
draws = 1
# How attention heads are combined: "mean" or "sum".
heads = "mean"
# Min-max normalize each importance map before thresholding.
normalize = true
# Side of the window used to drop isolated foreground cells.
orphan_kernel = 3

[prelim.gmm]
max_iterations = 200
# Stop when the mean log-likelihood improves by less than this.
tolerance = 0.0000001
variance_floor = 0.00000001
# Fewer samples or a smaller value range => degenerate map.
min_samples = 16
min_range = 0.000001

[finetune]
steps = 2000
batch = 8
learning_rate = 0.0005
max_grad_norm = 1.0
seed = 2027

[finetune.rect]
# Background rectangles: area share, aspect ratio bounds, rejection tries.
min_area_fraction = 0.05
max_area_fraction = 0.4
min_aspect = 0.3333333333333333
max_aspect = 3.0
max_tries = 100
# Rectangle corners and sides snap to this pixel grid (the latent cell size).
align = 4

[refine]
# Channel reduction of the inpainting difference: "mean", "max" or "luminance".
reduce = "mean"
# Where the difference GMM is fitted: "inside_preliminary" or "full_image".
fit_domain = "inside_preliminary"

[refine.gmm]
max_iterations = 200
tolerance = 0.0000001
variance_floor = 0.00000001
min_samples = 16
min_range = 0.000001

[synth]
count = 200
# Guidance between object and background prompts; 1 = plain object prompt.
guidance_scale = 1.0
# Gray level behind composited foregrounds.
fill = 0.5
seed = 77

[segtrain]
# Label sources to train a segmenter on: "prelim", "refined", "augmented".
variants = ["prelim", "refined", "augmented"]

[segtrain.train]
steps = 4000
batch = 8
learning_rate = 0.001
train_crop = 48
eval_crop = 64
base_width = 8
seed = 4242

[eval]
# Threshold diagnostic: pick the threshold reaching this TPR on `holdout`
# training images, report accuracy on the test split.
target_tpr = 0.95
holdout = 100
# Random-projection feature extractor for FID.
fid_dim = 16
fid_seed = 31

[toyset]
count = 500
seed = 99

[toyset.shapes]
image_size = 64
kinds = ["circle", "square", "triangle", "diamond"]
min_fg_fraction = 0.05
max_fg_fraction = 0.5
texture_amplitude = 0.06
noise_amplitude = 0.03
color_jitter = 0.06
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_code_defaults() {
        assert_eq!(PipelineConfig::parse(DEFAULT_CONFIG).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = PipelineConfig::parse("[finetune]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.finetune.steps, 5);
        assert_eq!(cfg.finetune.batch, FinetuneConfig::default().batch);
        assert_eq!(cfg.prelim, PrelimConfig::default());
    }

    #[test]
    fn typos_are_rejected() {
        assert!(PipelineConfig::parse("[prelim]\nt_0 = 3\n").is_err());
        assert!(PipelineConfig::parse("[general]\nworkers = 0\n").is_err());
        assert!(PipelineConfig::parse("[backend]\nkind = \"checkpoint\"\n").is_err());
    }
}
