use super::{gemm, Feat, Module, Param};
use rand::Rng;

pub fn silu(x: &Feat) -> Feat {
    let data = x.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    Feat::from_vec(x.c, x.h, x.w, data)
}

/// `x` is the pre-activation input.
pub fn silu_backward(x: &Feat, dy: &Feat) -> Feat {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v).exp());
            g * (s + v * s * (1.0 - s))
        })
        .collect();
    Feat::from_vec(x.c, x.h, x.w, data)
}

pub fn relu(x: &Feat) -> Feat {
    Feat::from_vec(x.c, x.h, x.w, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn relu_backward(x: &Feat, dy: &Feat) -> Feat {
    let data = x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Feat::from_vec(x.c, x.h, x.w, data)
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Feat) -> Feat {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for i in 0..h {
            for j in 0..w {
                let s = src[2 * i * x.w + 2 * j]
                    + src[2 * i * x.w + 2 * j + 1]
                    + src[(2 * i + 1) * x.w + 2 * j]
                    + src[(2 * i + 1) * x.w + 2 * j + 1];
                y.data[c * h * w + i * w + j] = 0.25 * s;
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Feat, in_h: usize, in_w: usize) -> Feat {
    let mut dx = Feat::zeros(dy.c, in_h, in_w);
    for c in 0..dy.c {
        for i in 0..dy.h {
            for j in 0..dy.w {
                let g = 0.25 * dy.data[c * dy.hw() + i * dy.w + j];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx.data[c * in_h * in_w + (2 * i + di) * in_w + 2 * j + dj] += g;
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling. Returns the pooled map and the flat argmax index per output.
pub fn max_pool2(x: &Feat) -> (Feat, Vec<usize>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Feat::zeros(x.c, h, w);
    let mut idx = vec![0usize; x.c * h * w];
    for c in 0..x.c {
        let base = c * x.hw();
        for i in 0..h {
            for j in 0..w {
                let mut best = base + 2 * i * x.w + 2 * j;
                for cand in [
                    base + 2 * i * x.w + 2 * j + 1,
                    base + (2 * i + 1) * x.w + 2 * j,
                    base + (2 * i + 1) * x.w + 2 * j + 1,
                ] {
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                let o = c * h * w + i * w + j;
                y.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward(dy: &Feat, idx: &[usize], in_h: usize, in_w: usize) -> Feat {
    let mut dx = Feat::zeros(dy.c, in_h, in_w);
    for (g, &i) in dy.data.iter().zip(idx) {
        dx.data[i] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Feat) -> Feat {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for i in 0..h {
            for j in 0..w {
                y.data[c * h * w + i * w + j] = src[(i / 2) * x.w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Feat) -> Feat {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for i in 0..dy.h {
            for j in 0..dy.w {
                dx.data[c * h * w + (i / 2) * w + j / 2] += dy.data[c * dy.hw() + i * dy.w + j];
            }
        }
    }
    dx
}

/// Transformer-style sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// Dense layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, gain: f32, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Param::kaiming(in_dim * out_dim, in_dim, gain, rng),
            bias: Param::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.value.clone();
        gemm(self.out_dim, self.in_dim, 1, &self.weight.value, false, x, false, &mut y, 1.0);
        y
    }

    /// Accumulates parameter gradients; the input is treated as a constant.
    pub fn backward(&mut self, x: &[f32], dy: &[f32]) {
        for (g, d) in self.bias.grad.iter_mut().zip(dy) {
            *g += d;
        }
        gemm(self.out_dim, 1, self.in_dim, dy, false, x, false, &mut self.weight.grad, 1.0);
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
