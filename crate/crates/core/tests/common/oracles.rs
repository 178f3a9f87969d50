//! Independent reference implementations the library is checked against.

use distill_core::mask::{BinaryMask, Provenance, ResolutionSpace};
use distill_core::maskgen::GmmFit;
use distill_core::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Two-component sample with known parameters.
pub fn bimodal(seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let n = r.random_range(200..500);
    let w = r.random_range(0.3..0.7);
    let lo = Normal::new(r.random_range(0.1..0.35), r.random_range(0.02..0.06)).unwrap();
    let hi = Normal::new(r.random_range(0.65..0.9), r.random_range(0.02..0.06)).unwrap();
    (0..n).map(|_| if r.random::<f64>() < w { lo.sample(&mut r) } else { hi.sample(&mut r) }).collect()
}

pub fn log_pdf(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((x - m).powi(2) / v + v.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Maximum-likelihood threshold by brute force: every split of the sorted
/// samples defines a two-Gaussian mixture (moments of each side, weights by
/// count); the split with the highest mixture likelihood wins, and its
/// posterior-equality point is located by bisection.
pub fn oracle_threshold(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let moments = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        (m, (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64).max(1e-8))
    };
    let mut best = (f64::NEG_INFINITY, [0.0; 6]);
    for k in 2..n - 2 {
        let (m0, v0) = moments(&x[..k]);
        let (m1, v1) = moments(&x[k..]);
        let (p0, p1) = (k as f64 / n as f64, (n - k) as f64 / n as f64);
        let ll: f64 = x
            .iter()
            .map(|&v| {
                let a = p0.ln() + log_pdf(v, m0, v0);
                let b = p1.ln() + log_pdf(v, m1, v1);
                a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln()
            })
            .sum();
        if ll > best.0 {
            best = (ll, [m0, v0, p0, m1, v1, p1]);
        }
    }
    let [m0, v0, p0, m1, v1, p1] = best.1;
    let gap = |t: f64| (p1.ln() + log_pdf(t, m1, v1)) - (p0.ln() + log_pdf(t, m0, v0));
    let (mut lo, mut hi) = (m0, m1);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn likelihood_never_drops(fit: &GmmFit) -> bool {
    fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0))
}

pub fn random_mask(seed: u64, h: usize, w: usize, density: f64) -> BinaryMask {
    let mut r = rng::rng(seed);
    BinaryMask::new(Array2::from_shape_fn((h, w), |_| r.random::<f64>() < density), ResolutionSpace::Latent, Provenance::Preliminary)
}

/// Direct window count with edge replication.
pub fn orphan_oracle(mask: &BinaryMask, k: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let r = (k / 2) as isize;
    let at = |i: isize, j: isize| mask.values[[i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]];
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut n = 0;
        for di in -r..=r {
            for dj in -r..=r {
                n += at(i as isize + di, j as isize + dj) as usize;
            }
        }
        2 * n >= k * k
    });
    BinaryMask::new(values, mask.space, mask.provenance)
}

/// Share of (positive, negative) pairs ordered correctly, ties half, as an
/// exact fraction `(2·wins + ties) / (2·P·N)`.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            twice += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Scores quantized to a few levels (so ties are common), positives shifted up.
pub fn auc_instance(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng::rng(seed);
    let n = r.random_range(2..=200);
    let levels = r.random_range(2..50);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
    labels[0] = true;
    labels[1] = false;
    let shift = r.random_range(0.0..3.0);
    let scores = labels
        .iter()
        .map(|&l| (r.random_range(0..levels) as f64 + if l { shift } else { 0.0 }).floor() / levels as f64)
        .collect();
    (scores, labels)
}
