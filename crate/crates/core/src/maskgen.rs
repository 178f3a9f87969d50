//! Binary masks from importance maps: two-component Gaussian mixture
//! thresholding, orphan removal, and nearest-neighbour upsampling.

use crate::backend::{DiffusionBackend, PromptSpec};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{BinaryMask, Provenance, ResolutionSpace};
use crate::probe::{self, HeadReduction, ImportanceMap};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub max_iterations: usize,
    /// Convergence when the mean per-sample log-likelihood moves less than this.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub min_samples: usize,
    /// Inputs whose range is below this are rejected as degenerate.
    pub min_range: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-7, variance_floor: 1e-8, min_samples: 16, min_range: 1e-6 }
    }
}

/// Two-component 1-D mixture; component 0 has the lower mean (background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: (f64, f64),
    pub variances: (f64, f64),
    pub weights: (f64, f64),
    pub threshold: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// No posterior-equality point between the means; threshold is their midpoint.
    pub threshold_is_midpoint: bool,
    /// Mean per-sample log-likelihood before each M-step and after the last.
    pub log_likelihood: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Params {
    mu: [f64; 2],
    var: [f64; 2],
    pi: [f64; 2],
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((x - mu) * (x - mu) / var + var.ln() + std::f64::consts::TAU.ln())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// E-step: responsibilities of component 1 and the mean log-likelihood.
fn e_step(x: &[f64], p: &Params, resp: &mut [f64]) -> f64 {
    let (l0, l1) = (p.pi[0].ln(), p.pi[1].ln());
    let mut total = 0.0;
    for (r, &v) in resp.iter_mut().zip(x) {
        let a = l0 + log_normal(v, p.mu[0], p.var[0]);
        let b = l1 + log_normal(v, p.mu[1], p.var[1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        *r = (b - lse).exp();
        total += lse;
    }
    total / x.len() as f64
}

fn m_step(x: &[f64], resp: &[f64], floor: f64) -> Params {
    let n1: f64 = resp.iter().sum();
    let n0 = x.len() as f64 - n1;
    let (mut s0, mut s1) = (0.0, 0.0);
    for (&r, &v) in resp.iter().zip(x) {
        s0 += (1.0 - r) * v;
        s1 += r * v;
    }
    let mu = [s0 / n0.max(f64::MIN_POSITIVE), s1 / n1.max(f64::MIN_POSITIVE)];
    let (mut q0, mut q1) = (0.0, 0.0);
    for (&r, &v) in resp.iter().zip(x) {
        q0 += (1.0 - r) * (v - mu[0]) * (v - mu[0]);
        q1 += r * (v - mu[1]) * (v - mu[1]);
    }
    let var = [(q0 / n0.max(f64::MIN_POSITIVE)).max(floor), (q1 / n1.max(f64::MIN_POSITIVE)).max(floor)];
    let n = x.len() as f64;
    let pi = [(n0 / n).max(f64::MIN_POSITIVE), (n1 / n).max(f64::MIN_POSITIVE)];
    Params { mu, var, pi }
}

/// Point between the means where both components have equal posterior,
/// found as a root of the quadratic in `x`.
fn posterior_equality(p: &Params) -> Option<f64> {
    let [m0, m1] = p.mu;
    let [v0, v1] = p.var;
    let k = p.pi[0].ln() - p.pi[1].ln() - 0.5 * v0.ln() + 0.5 * v1.ln();
    let a = 0.5 / v1 - 0.5 / v0;
    let b = m0 / v0 - m1 / v1;
    let c = m1 * m1 * 0.5 / v1 - m0 * m0 * 0.5 / v0 + k;
    let (lo, hi) = (m0.min(m1), m0.max(m1));
    let roots: Vec<f64> = if a.abs() < 1e-12 * (b.abs() + c.abs()).max(1e-300) {
        if b == 0.0 {
            vec![]
        } else {
            vec![-c / b]
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            vec![]
        } else {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            let mut r = vec![q / a];
            if q != 0.0 {
                r.push(c / q);
            }
            r
        }
    };
    roots.into_iter().filter(|r| r.is_finite() && *r >= lo && *r <= hi).min_by(|x, y| {
        let mid = 0.5 * (lo + hi);
        (x - mid).abs().total_cmp(&(y - mid).abs())
    })
}

pub fn fit_bimodal_gmm(samples: &[f64]) -> Result<GmmFit> {
    fit_bimodal_gmm_with(samples, &GmmConfig::default())
}

pub fn fit_bimodal_gmm_with(samples: &[f64], cfg: &GmmConfig) -> Result<GmmFit> {
    if samples.len() < cfg.min_samples {
        return Err(Error::TooFewSamples { needed: cfg.min_samples, got: samples.len() });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let range = sorted[sorted.len() - 1] - sorted[0];
    if range < cfg.min_range {
        return Err(Error::DegenerateDistribution { range });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let pooled = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(cfg.variance_floor);
    let mut p = Params { mu: [percentile(&sorted, 0.25), percentile(&sorted, 0.75)], var: [pooled; 2], pi: [0.5; 2] };
    let mut resp = vec![0.0; samples.len()];
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let ll = e_step(samples, &p, &mut resp);
        if let Some(&prev) = history.last() {
            if (ll - prev).abs() < cfg.tolerance {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if iterations == cfg.max_iterations {
            break;
        }
        p = m_step(samples, &resp, cfg.variance_floor);
        iterations += 1;
    }
    if p.mu[0] > p.mu[1] {
        p = Params { mu: [p.mu[1], p.mu[0]], var: [p.var[1], p.var[0]], pi: [p.pi[1], p.pi[0]] };
    }
    let root = posterior_equality(&p);
    Ok(GmmFit {
        means: (p.mu[0], p.mu[1]),
        variances: (p.var[0], p.var[1]),
        weights: (p.pi[0], p.pi[1]),
        threshold: root.unwrap_or(0.5 * (p.mu[0] + p.mu[1])),
        iterations_used: iterations,
        converged,
        threshold_is_midpoint: root.is_none(),
        log_likelihood: history,
    })
}

impl GmmFit {
    /// Mean per-sample log-likelihood of `x` under this mixture.
    pub fn mean_log_likelihood(&self, x: &[f64]) -> f64 {
        let p = Params {
            mu: [self.means.0, self.means.1],
            var: [self.variances.0, self.variances.1],
            pi: [self.weights.0, self.weights.1],
        };
        let mut resp = vec![0.0; x.len()];
        e_step(x, &p, &mut resp)
    }
}

/// Foreground iff value is strictly above the fit's threshold.
pub fn binarize(map: &Array2<f32>, fit: &GmmFit, space: ResolutionSpace, provenance: Provenance) -> BinaryMask {
    BinaryMask::new(map.mapv(|v| v as f64 > fit.threshold), space, provenance)
}

/// Mean filter over a `kernel × kernel` window with replicate padding,
/// re-thresholded at one half.
pub fn remove_orphans(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::Range(format!("orphan kernel must be odd and >= 3, got {kernel}")));
    }
    let (h, w) = mask.dims();
    let r = kernel / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    // Summed-area table of the replicate-padded grid.
    let mut sat = vec![0u32; (ph + 1) * (pw + 1)];
    for i in 0..ph {
        let si = i.saturating_sub(r).min(h - 1);
        let mut row = 0u32;
        for j in 0..pw {
            let sj = j.saturating_sub(r).min(w - 1);
            row += mask.values[[si, sj]] as u32;
            sat[(i + 1) * (pw + 1) + j + 1] = sat[i * (pw + 1) + j + 1] + row;
        }
    }
    let area = (kernel * kernel) as u32;
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i1, j1) = (i + kernel, j + kernel);
        let s = sat[i1 * (pw + 1) + j1] + sat[i * (pw + 1) + j] - sat[i * (pw + 1) + j1] - sat[i1 * (pw + 1) + j];
        2 * s >= area
    });
    Ok(BinaryMask::new(values, mask.space, mask.provenance))
}

/// Nearest-neighbour resize; the result is tagged as pixel space.
pub fn upsample_mask(mask: &BinaryMask, target: (usize, usize)) -> BinaryMask {
    let (h, w) = mask.dims();
    let values = Array2::from_shape_fn(target, |(i, j)| mask.values[[i * h / target.0, j * w / target.1]]);
    BinaryMask::new(values, ResolutionSpace::Pixel, mask.provenance)
}

/// Nearest-neighbour resize of a float map.
pub fn upsample_map(map: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let (h, w) = map.dim();
    Array2::from_shape_fn(target, |(i, j)| map[[i * h / target.0, j * w / target.1]])
}

/// Keeps the top-left cell of each block; the inverse of `upsample_mask` for
/// integer factors.
pub fn downsample_mask(mask: &BinaryMask, factor: usize, space: ResolutionSpace) -> BinaryMask {
    let (h, w) = mask.dims();
    let values = Array2::from_shape_fn((h / factor, w / factor), |(i, j)| mask.values[[i * factor, j * factor]]);
    BinaryMask::new(values, space, mask.provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrelimConfig {
    pub t0: usize,
    pub draws: usize,
    pub heads: HeadReduction,
    /// Feed instance-normalized scores (rather than raw sums) to the mixture.
    pub normalize: bool,
    pub orphan_kernel: usize,
    pub gmm: GmmConfig,
}

impl Default for PrelimConfig {
    fn default() -> Self {
        Self { t0: 40, draws: 1, heads: HeadReduction::Mean, normalize: true, orphan_kernel: 3, gmm: GmmConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct PrelimOutcome {
    /// Raw aggregated importance of the target word.
    pub importance: ImportanceMap,
    pub fit: Option<GmmFit>,
    /// Latent-resolution preliminary mask; empty when `degenerate`.
    pub mask: BinaryMask,
    pub degenerate: bool,
}

/// Mixture threshold of a score map, returning the latent mask.
pub fn mask_from_scores(scores: &Array2<f32>, cfg: &PrelimConfig) -> Result<(Option<GmmFit>, BinaryMask)> {
    let (h, w) = scores.dim();
    let samples: Vec<f64> = scores.iter().map(|&v| (v as f64).abs()).collect();
    match fit_bimodal_gmm_with(&samples, &cfg.gmm) {
        Ok(fit) => {
            let abs = scores.mapv(f32::abs);
            let raw = binarize(&abs, &fit, ResolutionSpace::Latent, Provenance::Preliminary);
            Ok((Some(fit), remove_orphans(&raw, cfg.orphan_kernel)?))
        }
        Err(Error::DegenerateDistribution { .. }) => {
            Ok((None, BinaryMask::empty(h, w, ResolutionSpace::Latent, Provenance::Preliminary)))
        }
        Err(e) => Err(e),
    }
}

/// Capture, aggregate, normalize, fit, binarize, and clean up.
pub fn preliminary_mask(
    backend: &dyn DiffusionBackend,
    image: &Image,
    prompt: &PromptSpec,
    cfg: &PrelimConfig,
    seed: u64,
) -> Result<PrelimOutcome> {
    let traj = probe::capture_trajectory(backend, image, prompt, cfg.t0, cfg.draws, seed)?;
    let importance = probe::target_importance(&traj, prompt, cfg.heads)?;
    let scores = if cfg.normalize { probe::normalize_instance(&importance).scores } else { importance.scores.clone() };
    let (fit, mask) = mask_from_scores(&scores, cfg)?;
    let degenerate = fit.is_none();
    Ok(PrelimOutcome { importance, fit, mask, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn jittered_two_clusters() {
        let mut r = rng::rng(1);
        let x: Vec<f64> = (0..60).map(|i| (i % 2) as f64 + r.random_range(-1e-3..1e-3)).collect();
        let fit = fit_bimodal_gmm(&x).unwrap();
        assert!((fit.threshold - 0.5).abs() < 0.05, "{}", fit.threshold);
        assert!(fit.means.0 < fit.means.1);
    }

    #[test]
    fn recovers_known_mixture() {
        let mut r = rng::rng(2);
        let draws = rng::normal_vec(&mut r, 10_000);
        let x: Vec<f64> = draws
            .iter()
            .enumerate()
            .map(|(i, &z)| if i % 2 == 0 { 0.2 } else { 0.8 } + 0.1 * z as f64)
            .collect();
        let fit = fit_bimodal_gmm(&x).unwrap();
        assert!((fit.means.0 - 0.2).abs() < 0.02 * 0.2);
        assert!((fit.means.1 - 0.8).abs() < 0.02 * 0.8);
        assert!(fit.converged);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(fit_bimodal_gmm(&[0.3; 40]), Err(Error::DegenerateDistribution { .. })));
        assert!(matches!(fit_bimodal_gmm(&[0.0, 1.0]), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn binarize_examples() {
        let x: Vec<f64> = (0..32).map(|i| (i % 2) as f64).collect();
        let fit = fit_bimodal_gmm(&x).unwrap();
        let m = binarize(&array![[0.1f32, 0.9]], &fit, ResolutionSpace::Latent, Provenance::Preliminary);
        assert_eq!(m.values, array![[false, true]]);
        let all = binarize(&array![[2.0f32, 3.0]], &fit, ResolutionSpace::Latent, Provenance::Preliminary);
        assert_eq!(all.count(), 2);
    }

    #[test]
    fn orphan_examples() {
        let mut single = BinaryMask::empty(9, 9, ResolutionSpace::Latent, Provenance::Preliminary);
        single.values[[4, 4]] = true;
        assert!(remove_orphans(&single, 3).unwrap().is_empty());
        let mut block = BinaryMask::empty(9, 9, ResolutionSpace::Latent, Provenance::Preliminary);
        for r in 2..7 {
            for c in 2..7 {
                block.values[[r, c]] = true;
            }
        }
        let out = remove_orphans(&block, 3).unwrap();
        for r in 3..6 {
            for c in 3..6 {
                assert!(out.values[[r, c]]);
            }
        }
        assert!(remove_orphans(&block, 4).is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = BinaryMask::new(array![[true, false], [false, true]], ResolutionSpace::Latent, Provenance::Preliminary);
        let up = upsample_mask(&m, (4, 4));
        assert_eq!(up.space, ResolutionSpace::Pixel);
        assert!(up.values[[1, 1]] && !up.values[[1, 2]] && up.values[[3, 2]]);
        assert_eq!(downsample_mask(&up, 2, ResolutionSpace::Latent), m);
        let full = BinaryMask::full(2, 2, ResolutionSpace::Latent, Provenance::Preliminary);
        assert_eq!(upsample_mask(&full, (8, 8)).count(), 64);
    }

    #[test]
    fn constant_map_gives_empty_mask() {
        let (fit, mask) = mask_from_scores(&Array2::zeros((16, 16)), &PrelimConfig::default()).unwrap();
        assert!(fit.is_none());
        assert!(mask.is_empty());
    }
}
