//! Desk-scale trainable backend: a fixed block autoencoder and a two-level
//! encoder/decoder denoiser with one cross-attention layer per level.

use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::tokenizer::WordPieceTokenizer;
use super::{BackendDescriptor, BackendKind, DenoiseResult, DiffusionBackend, LatentCode, PromptSpec, WordSpan};
use super::AttentionRecord;
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::nn::{
    self, avg_pool2, avg_pool2_backward, silu, silu_backward, sinusoidal_embedding, upsample2,
    upsample2_backward, Adam, AttentionCache, Conv2d, ConvCache, CrossAttention, Feat, Linear, Module,
    Param,
};
use crate::rng;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FGBGTOY\0";
const FORMAT_VERSION: u32 = 1;
/// Gain of the luminance-checker detail channel.
const DETAIL_GAIN: f32 = 4.0;
const EMBEDDING_SEED: u64 = 0x0E3B_EDD1_4650_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub image_size: usize,
    pub spatial_scale: usize,
    pub latent_channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub schedule: ScheduleConfig,
    pub denoised_clip: f32,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            spatial_scale: 4,
            latent_channels: 4,
            width1: 16,
            width2: 32,
            heads: 2,
            head_dim: 8,
            time_dim: 32,
            embed_dim: 16,
            schedule: ScheduleConfig::default(),
            denoised_clip: 1.0,
            init_seed: 17,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_channels != 4 {
            return Err(Error::Config("toy autoencoder has exactly 4 latent channels".into()));
        }
        if self.spatial_scale < 2 || self.spatial_scale % 2 != 0 {
            return Err(Error::Config("toy spatial scale must be even".into()));
        }
        let lat = self.image_size / self.spatial_scale;
        if self.image_size % self.spatial_scale != 0 || lat % 2 != 0 {
            return Err(Error::Config("latent size must be even".into()));
        }
        Ok(())
    }
}

/// The denoiser network. Parameters are visited in declaration order.
#[derive(Debug, Clone)]
struct Denoiser {
    conv_in: Conv2d,
    time1: Linear,
    conv1b: Conv2d,
    attn1: CrossAttention,
    conv_down: Conv2d,
    time2: Linear,
    conv2b: Conv2d,
    attn2: CrossAttention,
    conv_up: Conv2d,
    conv_out: Conv2d,
}

struct Cache {
    te: Vec<f32>,
    c_in: ConvCache,
    a0: Feat,
    c1b: ConvCache,
    a2: Feat,
    attn1: AttentionCache,
    h1_dims: (usize, usize),
    c_down: ConvCache,
    b0: Feat,
    c2b: ConvCache,
    b2: Feat,
    attn2: AttentionCache,
    c_up: ConvCache,
    c0: Feat,
    c_out: ConvCache,
}

fn add_channel_bias(x: &mut Feat, bias: &[f32]) {
    let hw = x.hw();
    for (c, chunk) in x.data.chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[c]);
    }
}

fn channel_sums(x: &Feat) -> Vec<f32> {
    x.data.chunks(x.hw()).map(|c| c.iter().sum()).collect()
}

impl Denoiser {
    fn new(cfg: &ToyConfig) -> Self {
        let mut r = rng::rng(cfg.init_seed);
        let (c1, c2, lc) = (cfg.width1, cfg.width2, cfg.latent_channels);
        Self {
            conv_in: Conv2d::new(lc, c1, 3, 1.4, &mut r),
            time1: Linear::new(cfg.time_dim, c1, 0.5, &mut r),
            conv1b: Conv2d::new(c1, c1, 3, 1.4, &mut r),
            attn1: CrossAttention::new(c1, cfg.embed_dim, cfg.heads, cfg.head_dim, &mut r),
            conv_down: Conv2d::new(c1, c2, 3, 1.4, &mut r),
            time2: Linear::new(cfg.time_dim, c2, 0.5, &mut r),
            conv2b: Conv2d::new(c2, c2, 3, 1.4, &mut r),
            attn2: CrossAttention::new(c2, cfg.embed_dim, cfg.heads, cfg.head_dim, &mut r),
            conv_up: Conv2d::new(c1 + c2, c1, 3, 1.4, &mut r),
            conv_out: Conv2d::new(c1, lc, 3, 0.1, &mut r),
        }
    }

    fn forward(&self, z: &Feat, te: &[f32], ctx: &[f32]) -> (Feat, Cache) {
        let (a0, c_in) = self.conv_in.forward(z);
        let mut s0 = silu(&a0);
        add_channel_bias(&mut s0, &self.time1.forward(te));
        let (a2, c1b) = self.conv1b.forward(&s0);
        let (h1, attn1) = self.attn1.forward(&silu(&a2), ctx);

        let (b0, c_down) = self.conv_down.forward(&avg_pool2(&h1));
        let mut s3 = silu(&b0);
        add_channel_bias(&mut s3, &self.time2.forward(te));
        let (b2, c2b) = self.conv2b.forward(&s3);
        let (h2, attn2) = self.attn2.forward(&silu(&b2), ctx);

        let (c0, c_up) = self.conv_up.forward(&upsample2(&h2).concat(&h1));
        let (out, c_out) = self.conv_out.forward(&silu(&c0));
        let cache = Cache {
            te: te.to_vec(),
            c_in,
            a0,
            c1b,
            a2,
            attn1,
            h1_dims: (h1.h, h1.w),
            c_down,
            b0,
            c2b,
            b2,
            attn2,
            c_up,
            c0,
            c_out,
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &Cache, ctx: &[f32], dout: &Feat) {
        let d_s5 = self.conv_out.backward(&cache.c_out, dout);
        let d_c0 = silu_backward(&cache.c0, &d_s5);
        let d_cat = self.conv_up.backward(&cache.c_up, &d_c0);
        let (d_u, d_h1_skip) = d_cat.split(self.attn2.channels);
        let d_h2 = upsample2_backward(&d_u);
        let d_s4 = self.attn2.backward(&cache.attn2, ctx, &d_h2);
        let d_b2 = silu_backward(&cache.b2, &d_s4);
        let d_s3 = self.conv2b.backward(&cache.c2b, &d_b2);
        self.time2.backward(&cache.te, &channel_sums(&d_s3));
        let d_b0 = silu_backward(&cache.b0, &d_s3);
        let d_p = self.conv_down.backward(&cache.c_down, &d_b0);
        let mut d_h1 = avg_pool2_backward(&d_p, cache.h1_dims.0, cache.h1_dims.1);
        d_h1.add_assign(&d_h1_skip);
        let d_s2 = self.attn1.backward(&cache.attn1, ctx, &d_h1);
        let d_a2 = silu_backward(&cache.a2, &d_s2);
        let d_s0 = self.conv1b.backward(&cache.c1b, &d_a2);
        self.time1.backward(&cache.te, &channel_sums(&d_s0));
        let d_a0 = silu_backward(&cache.a0, &d_s0);
        self.conv_in.backward(&cache.c_in, &d_a0);
    }
}

impl Module for Denoiser {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv_in.visit(f);
        self.time1.visit(f);
        self.conv1b.visit(f);
        self.attn1.visit(f);
        self.conv_down.visit(f);
        self.time2.visit(f);
        self.conv2b.visit(f);
        self.attn2.visit(f);
        self.conv_up.visit(f);
        self.conv_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv_in.visit_mut(f);
        self.time1.visit_mut(f);
        self.conv1b.visit_mut(f);
        self.attn1.visit_mut(f);
        self.conv_down.visit_mut(f);
        self.time2.visit_mut(f);
        self.conv2b.visit_mut(f);
        self.attn2.visit_mut(f);
        self.conv_up.visit_mut(f);
        self.conv_out.visit_mut(f);
    }
}

/// One denoising-loss example. `loss_mask` (latent resolution) restricts the
/// squared error to the cells where it is non-zero.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub z0: Array3<f32>,
    pub token_ids: Vec<usize>,
    pub timestep: usize,
    pub noise: Array3<f32>,
    pub loss_mask: Option<Array2<f32>>,
}

pub struct ToyBackend {
    config: ToyConfig,
    descriptor: BackendDescriptor,
    schedule: NoiseSchedule,
    tokenizer: WordPieceTokenizer,
    embeddings: Vec<f32>,
    net: Denoiser,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Clone for ToyBackend {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            descriptor: self.descriptor.clone(),
            schedule: self.schedule.clone(),
            tokenizer: self.tokenizer.clone(),
            embeddings: self.embeddings.clone(),
            net: self.net.clone(),
        }
    }
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::new(config.schedule)?;
        let tokenizer = WordPieceTokenizer::default();
        let lat = config.image_size / config.spatial_scale;
        let descriptor = BackendDescriptor {
            kind: BackendKind::Toy,
            image_shape: (config.image_size, config.image_size),
            latent_channels: config.latent_channels,
            spatial_scale: config.spatial_scale,
            schedule_length: config.schedule.steps,
            layer_resolutions: vec![(lat, lat), (lat / 2, lat / 2)],
            heads: config.heads,
            tokenizer: "toy-wordpiece-16".into(),
            denoised_clip: Some(config.denoised_clip),
        };
        descriptor.validate()?;
        let mut er = rng::rng(EMBEDDING_SEED);
        let embeddings = rng::normal_vec(&mut er, tokenizer.vocab_size() * config.embed_dim);
        let net = Denoiser::new(&config);
        Ok(Self { config, descriptor, schedule, tokenizer, embeddings, net })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<f32> {
        self.net.flat_values()
    }

    pub fn num_parameters(&self) -> usize {
        self.net.num_params()
    }

    /// Frozen token embeddings, row-major `tokens × embed_dim`.
    fn context(&self, token_ids: &[usize]) -> Result<Vec<f32>> {
        let e = self.config.embed_dim;
        let mut ctx = Vec::with_capacity(token_ids.len() * e);
        for &id in token_ids {
            if id >= self.tokenizer.vocab_size() {
                return Err(Error::Contract(format!("token id {id} outside vocabulary")));
            }
            ctx.extend_from_slice(&self.embeddings[id * e..(id + 1) * e]);
        }
        if ctx.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        Ok(ctx)
    }

    fn time_embedding(&self, t: usize) -> Vec<f32> {
        sinusoidal_embedding(t as f32, self.config.time_dim)
    }

    fn to_feat(values: &Array3<f32>) -> Feat {
        let (c, h, w) = values.dim();
        Feat::from_vec(c, h, w, values.iter().copied().collect())
    }

    fn noised(&self, ex: &TrainExample) -> Feat {
        let (a, b) = self.schedule.coefficients(ex.timestep);
        let data = ex.z0.iter().zip(ex.noise.iter()).map(|(&z, &n)| a * z + b * n).collect();
        let (c, h, w) = ex.z0.dim();
        Feat::from_vec(c, h, w, data)
    }

    fn masked_error(ex: &TrainExample, pred: &Feat) -> (f32, Feat) {
        let (c, h, w) = ex.z0.dim();
        let hw = h * w;
        let weights: Vec<f32> = match &ex.loss_mask {
            Some(m) => m.iter().copied().collect(),
            None => vec![1.0; hw],
        };
        let denom = c as f32 * weights.iter().sum::<f32>();
        let mut grad = Feat::zeros(c, h, w);
        if denom <= 0.0 {
            return (0.0, grad);
        }
        let mut loss = 0.0f32;
        for (i, (&p, &n)) in pred.data.iter().zip(ex.noise.iter()).enumerate() {
            let m = weights[i % hw];
            if m == 0.0 {
                continue;
            }
            let d = p - n;
            loss += m * d * d;
            grad.data[i] = 2.0 * m * d / denom;
        }
        (loss / denom, grad)
    }

    /// Denoising loss of one example without touching gradients.
    pub fn example_loss(&self, ex: &TrainExample) -> Result<f32> {
        let ctx = self.context(&ex.token_ids)?;
        let (pred, _) = self.net.forward(&self.noised(ex), &self.time_embedding(ex.timestep), &ctx);
        Ok(Self::masked_error(ex, &pred).0)
    }

    /// Gradient of the mean loss over `batch` with respect to the predicted
    /// noise of example `index`, as a latent-shaped array.
    pub fn output_gradient(&self, batch: &[TrainExample], index: usize) -> Result<Array3<f32>> {
        let ex = &batch[index];
        let ctx = self.context(&ex.token_ids)?;
        let (pred, _) = self.net.forward(&self.noised(ex), &self.time_embedding(ex.timestep), &ctx);
        let (_, g) = Self::masked_error(ex, &pred);
        let scale = 1.0 / batch.len() as f32;
        Ok(Array3::from_shape_vec(ex.z0.dim(), g.data.iter().map(|v| v * scale).collect()).expect("shape"))
    }

    /// Accumulates gradients over the batch, clips, and applies one Adam step.
    /// Returns the mean loss.
    pub fn train_batch(&mut self, batch: &[TrainExample], opt: &mut Adam, max_grad_norm: f32) -> Result<f32> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        self.net.zero_grad();
        let mut total = 0.0;
        for ex in batch {
            if ex.timestep == 0 || ex.timestep > self.schedule.len() {
                return Err(Error::Range(format!("training timestep {}", ex.timestep)));
            }
            let ctx = self.context(&ex.token_ids)?;
            let te = self.time_embedding(ex.timestep);
            let (pred, cache) = self.net.forward(&self.noised(ex), &te, &ctx);
            let (loss, grad) = Self::masked_error(ex, &pred);
            total += loss;
            self.net.backward(&cache, &ctx, &grad);
        }
        self.net.scale_grads(1.0 / batch.len() as f32);
        nn::clip_grad_norm(&mut self.net, max_grad_norm);
        opt.step(&mut self.net);
        Ok(total / batch.len() as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cfg = serde_json::to_vec(&self.config)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(&cfg)?;
        let params = self.net.flat_values();
        out.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a toy backend blob"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let cfg_len = u32_at(12) as usize;
        let cfg_end = 16 + cfg_len;
        if bytes.len() < cfg_end + 8 {
            return Err(bad("truncated header"));
        }
        let config: ToyConfig = serde_json::from_slice(&bytes[16..cfg_end])?;
        let n = u64::from_le_bytes(bytes[cfg_end..cfg_end + 8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[cfg_end + 8..];
        if body.len() != n * 4 {
            return Err(bad("parameter payload length mismatch"));
        }
        let params: Vec<f32> =
            body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut backend = Self::new(config)?;
        if !backend.net.load_flat(&params) {
            return Err(bad("parameter count does not match architecture"));
        }
        Ok(backend)
    }
}

impl DiffusionBackend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)> {
        self.tokenizer.encode(text)
    }

    fn encode(&self, image: &Image) -> Result<LatentCode> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB image, got {c} channels")));
        }
        let (lc, lh, lw) = self.descriptor.latent_shape_for(h, w)?;
        let s = self.config.spatial_scale;
        let n = (s * s) as f32;
        let mut z = Array3::zeros((lc, lh, lw));
        for i in 0..lh {
            for j in 0..lw {
                let mut means = [0.0f32; 3];
                let mut detail = 0.0f32;
                for di in 0..s {
                    for dj in 0..s {
                        let (r, col) = (i * s + di, j * s + dj);
                        let sign = checker(di, dj);
                        let mut lum = 0.0;
                        for (ch, m) in means.iter_mut().enumerate() {
                            let v = image[[ch, r, col]];
                            *m += v;
                            lum += v;
                        }
                        detail += sign * lum / 3.0;
                    }
                }
                for ch in 0..3 {
                    z[[ch, i, j]] = 2.0 * means[ch] / n - 1.0;
                }
                z[[3, i, j]] = DETAIL_GAIN * detail / n;
            }
        }
        Ok(LatentCode { values: z, timestep: 0, spatial_scale: s })
    }

    fn decode(&self, z: &LatentCode) -> Result<Image> {
        let (lc, lh, lw) = z.values.dim();
        if lc != self.config.latent_channels {
            return Err(Error::Shape(format!("latent has {lc} channels")));
        }
        let s = self.config.spatial_scale;
        let mut img = Image::zeros((3, lh * s, lw * s));
        for ((ch, r, col), v) in img.indexed_iter_mut() {
            let (i, j) = (r / s, col / s);
            *v = (z.values[[ch, i, j]] + 1.0) / 2.0 + z.values[[3, i, j]] / DETAIL_GAIN * checker(r % s, col % s);
        }
        Ok(img)
    }

    fn predict_noise(&self, z: &LatentCode, prompt: &PromptSpec, capture_attention: bool) -> Result<DenoiseResult> {
        let (c, h, w) = z.values.dim();
        if c != self.config.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("latent {:?} not supported", z.values.dim())));
        }
        let ctx = self.context(&prompt.token_ids)?;
        let (out, cache) = self.net.forward(&Self::to_feat(&z.values), &self.time_embedding(z.timestep), &ctx);
        let predicted_update = Array3::from_shape_vec((c, h, w), out.data).expect("shape");
        let mut attention_records = Vec::new();
        if capture_attention {
            let tokens = prompt.token_ids.len();
            for (layer_index, (attn, shape)) in
                [(&cache.attn1, (h, w)), (&cache.attn2, (h / 2, w / 2))].into_iter().enumerate()
            {
                for (head_index, p) in attn.probs.iter().enumerate() {
                    attention_records.push(AttentionRecord {
                        layer_index,
                        head_index,
                        probabilities: Array2::from_shape_vec((shape.0 * shape.1, tokens), p.clone())
                            .expect("shape"),
                        spatial_shape: shape,
                        timestep: z.timestep,
                        draw: 0,
                    });
                }
            }
        }
        Ok(DenoiseResult { predicted_update, attention_records })
    }
}

fn checker(r: usize, c: usize) -> f32 {
    if (r + c) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}
