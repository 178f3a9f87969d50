//! Cross-attention capture along the forward-noised trajectory of an image and
//! its aggregation into per-token importance maps.

use crate::backend::{AttentionRecord, DiffusionBackend, LatentCode, PromptSpec};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::rng;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    pub t0: usize,
    pub draws: usize,
    pub heads: HeadReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub scores: Array2<f32>,
    pub token_index: usize,
    pub aggregation: Aggregation,
    pub normalized: bool,
}

/// Attention records of one image grouped by `(timestep, draw)`, plus the
/// latent grid every map is resampled to.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<AttentionRecord>,
    pub latent_shape: (usize, usize),
    pub t0: usize,
    pub draws: usize,
}

impl Trajectory {
    pub fn timesteps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.records.iter().map(|r| r.timestep).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }
}

fn draw_noise(seed: u64, t: usize, draw: usize, dim: (usize, usize, usize)) -> Array3<f32> {
    let mut r = rng::rng(rng::derive_seed(seed, &[rng::tag("probe"), t as u64, draw as u64]));
    Array3::from_shape_vec(dim, rng::normal_vec(&mut r, dim.0 * dim.1 * dim.2)).expect("shape")
}

/// For each `t = 1..=t0`, `draws` independent re-noisings of `z0` are
/// denoised once with attention capture.
pub fn capture_from_latent(
    backend: &dyn DiffusionBackend,
    z0: &LatentCode,
    prompt: &PromptSpec,
    t0: usize,
    draws: usize,
    seed: u64,
) -> Result<Trajectory> {
    let t_max = backend.schedule().len();
    if t0 == 0 || t0 > t_max {
        return Err(Error::Range(format!("T0 = {t0} outside 1..={t_max}")));
    }
    if draws == 0 {
        return Err(Error::Range("at least one draw required".into()));
    }
    let mut records = Vec::new();
    for t in 1..=t0 {
        for draw in 0..draws {
            let noise = draw_noise(seed, t, draw, z0.values.dim());
            let zt = backend.add_noise(&z0.at(0), t, &noise)?;
            let result = backend.denoise_step(&zt, prompt, true)?;
            records.extend(result.attention_records.into_iter().map(|mut r| {
                r.timestep = t;
                r.draw = draw;
                r
            }));
        }
    }
    Ok(Trajectory { records, latent_shape: z0.spatial(), t0, draws })
}

pub fn capture_trajectory(
    backend: &dyn DiffusionBackend,
    image: &Image,
    prompt: &PromptSpec,
    t0: usize,
    draws: usize,
    seed: u64,
) -> Result<Trajectory> {
    let z0 = backend.encode(image)?;
    capture_from_latent(backend, &z0, prompt, t0, draws, seed)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resample_bilinear(src: &Array2<f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == out {
        return src.clone();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f32)
    };
    Array2::from_shape_fn(out, |(i, j)| {
        let (r0, r1, fr) = coord(i, h, out.0);
        let (c0, c1, fc) = coord(j, w, out.1);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

type LayerGroups<'a> = BTreeMap<(usize, usize), BTreeMap<usize, Vec<&'a AttentionRecord>>>;

fn group(records: &[AttentionRecord], token_index: usize) -> Result<LayerGroups<'_>> {
    if records.is_empty() {
        return Err(Error::Contract("no attention records to aggregate".into()));
    }
    let tokens = records[0].tokens();
    let mut groups: LayerGroups = BTreeMap::new();
    for r in records {
        if r.tokens() != tokens {
            return Err(Error::Contract("records disagree on token count".into()));
        }
        groups.entry((r.timestep, r.draw)).or_default().entry(r.layer_index).or_default().push(r);
    }
    if token_index >= tokens {
        return Err(Error::Range(format!("token {token_index} outside prompt of {tokens} tokens")));
    }
    for layers in groups.values_mut() {
        for heads in layers.values_mut() {
            heads.sort_by_key(|r| r.head_index);
        }
    }
    Ok(groups)
}

/// One layer's map for one token: heads reduced, resampled to `shape`.
fn layer_map(heads: &[&AttentionRecord], token: usize, reduce: HeadReduction, shape: (usize, usize)) -> Array2<f32> {
    let mut acc = heads[0].token_map(token);
    for r in &heads[1..] {
        acc += &r.token_map(token);
    }
    if reduce == HeadReduction::Mean {
        acc /= heads.len() as f32;
    }
    resample_bilinear(&acc, shape)
}

/// Expectation form: per `(t, draw)` sum layers, average draws within each
/// `t`, sum over `t`.
pub fn aggregate(traj: &Trajectory, token_index: usize, heads: HeadReduction) -> Result<ImportanceMap> {
    let groups = group(&traj.records, token_index)?;
    let mut per_t: BTreeMap<usize, (Array2<f32>, usize)> = BTreeMap::new();
    for ((t, _draw), layers) in &groups {
        let mut draw_sum = Array2::zeros(traj.latent_shape);
        for hs in layers.values() {
            draw_sum += &layer_map(hs, token_index, heads, traj.latent_shape);
        }
        let entry = per_t.entry(*t).or_insert_with(|| (Array2::zeros(traj.latent_shape), 0));
        entry.0 += &draw_sum;
        entry.1 += 1;
    }
    let mut scores = Array2::zeros(traj.latent_shape);
    for (sum, n) in per_t.values() {
        scores += &(sum / *n as f32);
    }
    Ok(ImportanceMap {
        scores,
        token_index,
        aggregation: Aggregation { t0: traj.t0, draws: traj.draws, heads },
        normalized: false,
    })
}

/// Simplified form: a single draw per timestep, summed directly over
/// timesteps and layers.
pub fn aggregate_single_draw(traj: &Trajectory, token_index: usize, heads: HeadReduction) -> Result<ImportanceMap> {
    let groups = group(&traj.records, token_index)?;
    if groups.keys().any(|&(_, d)| d != 0) {
        return Err(Error::Contract("simplified aggregation needs exactly one draw per timestep".into()));
    }
    let mut scores = Array2::zeros(traj.latent_shape);
    for layers in groups.values() {
        let mut step = Array2::zeros(traj.latent_shape);
        for hs in layers.values() {
            step += &layer_map(hs, token_index, heads, traj.latent_shape);
        }
        scores += &step;
    }
    Ok(ImportanceMap {
        scores,
        token_index,
        aggregation: Aggregation { t0: traj.t0, draws: 1, heads },
        normalized: false,
    })
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_instance(map: &ImportanceMap) -> ImportanceMap {
    let lo = map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let scores = if range > 0.0 && range.is_finite() {
        map.scores.mapv(|v| (v - lo) / range)
    } else {
        Array2::zeros(map.scores.dim())
    };
    ImportanceMap { scores, normalized: true, ..map.clone() }
}

#[derive(Debug, Clone)]
pub struct TokenMap {
    /// Token piece, or the full word for a summed multi-piece entry.
    pub label: String,
    pub token_indices: Vec<usize>,
    pub map: ImportanceMap,
}

/// One map per token position, plus a summed map for every word that was
/// split into several pieces.
pub fn per_token_maps(
    backend: &dyn DiffusionBackend,
    image: &Image,
    prompt: &PromptSpec,
    t0: usize,
    draws: usize,
    seed: u64,
    heads: HeadReduction,
) -> Result<Vec<TokenMap>> {
    let traj = capture_trajectory(backend, image, prompt, t0, draws, seed)?;
    token_maps_from(&traj, prompt, heads)
}

pub fn token_maps_from(traj: &Trajectory, prompt: &PromptSpec, heads: HeadReduction) -> Result<Vec<TokenMap>> {
    let mut maps = Vec::with_capacity(prompt.len());
    for i in 0..prompt.len() {
        let label = prompt
            .words
            .iter()
            .find(|w| w.positions.contains(&i))
            .map(|w| if w.positions.len() == 1 { w.word.clone() } else { format!("{}[{}]", w.word, i) })
            .unwrap_or_else(|| format!("#{i}"));
        maps.push(TokenMap { label, token_indices: vec![i], map: aggregate(traj, i, heads)? });
    }
    for w in prompt.words.iter().filter(|w| w.positions.len() > 1) {
        let map = sum_maps(w.positions.iter().map(|&i| &maps[i].map))?;
        maps.push(TokenMap { label: w.word.clone(), token_indices: w.positions.clone(), map });
    }
    Ok(maps)
}

fn sum_maps<'a>(mut maps: impl Iterator<Item = &'a ImportanceMap>) -> Result<ImportanceMap> {
    let first = maps.next().ok_or_else(|| Error::Contract("no maps to sum".into()))?.clone();
    Ok(maps.fold(first, |mut acc, m| {
        acc.scores += &m.scores;
        acc
    }))
}

/// Importance of the prompt's target word (pieces summed), un-normalized.
pub fn target_importance(traj: &Trajectory, prompt: &PromptSpec, heads: HeadReduction) -> Result<ImportanceMap> {
    let maps = prompt
        .target_token_indices
        .iter()
        .map(|&i| aggregate(traj, i, heads))
        .collect::<Result<Vec<_>>>()?;
    sum_maps(maps.iter())
}
