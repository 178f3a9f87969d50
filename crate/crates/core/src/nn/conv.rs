use super::{gemm, Feat, Module, Param};
use rand::Rng;

/// Square-kernel 2-D convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: Param,
    pub bias: Param,
}

/// Saved im2col buffer (empty for 1×1 kernels, which read the input directly).
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    input: Option<Feat>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, gain: f32, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel must be odd");
        let fan_in = in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            weight: Param::kaiming(out_c * fan_in, fan_in, gain, rng),
            bias: Param::zeros(out_c),
        }
    }

    pub fn zeroed(in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            weight: Param::zeros(out_c * in_c * k * k),
            bias: Param::zeros(out_c),
        }
    }

    fn im2col(&self, x: &Feat) -> Vec<f32> {
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0f32; self.in_c * k * k * hw];
        for ci in 0..self.in_c {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Feat {
        let k = self.k;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut out = Feat::zeros(self.in_c, h, w);
        for ci in 0..self.in_c {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for xx in x0..x1 {
                            dst[sy as usize * w + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Feat) -> (Feat, ConvCache) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let hw = x.hw();
        let mut y = Feat::zeros(self.out_c, x.h, x.w);
        for (o, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        let kk = self.in_c * self.k * self.k;
        if self.k == 1 {
            gemm(self.out_c, kk, hw, &self.weight.value, false, &x.data, false, &mut y.data, 1.0);
            let cache = ConvCache { cols: Vec::new(), input: Some(x.clone()), h: x.h, w: x.w };
            (y, cache)
        } else {
            let cols = self.im2col(x);
            gemm(self.out_c, kk, hw, &self.weight.value, false, &cols, false, &mut y.data, 1.0);
            (y, ConvCache { cols, input: None, h: x.h, w: x.w })
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Feat) -> Feat {
        let hw = cache.h * cache.w;
        let kk = self.in_c * self.k * self.k;
        for (o, chunk) in dy.data.chunks(hw).enumerate() {
            self.bias.grad[o] += chunk.iter().sum::<f32>();
        }
        let cols: &[f32] = match &cache.input {
            Some(x) => &x.data,
            None => &cache.cols,
        };
        // dW (out×kk) += dy (out×hw) · colsᵀ (hw×kk)
        gemm(self.out_c, hw, kk, &dy.data, false, cols, true, &mut self.weight.grad, 1.0);
        // dcols (kk×hw) = Wᵀ (kk×out) · dy (out×hw)
        let mut dcols = vec![0.0f32; kk * hw];
        gemm(kk, self.out_c, hw, &self.weight.value, true, &dy.data, false, &mut dcols, 0.0);
        if self.k == 1 {
            Feat::from_vec(self.in_c, cache.h, cache.w, dcols)
        } else {
            self.col2im(&dcols, cache.h, cache.w)
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{assert_close, numeric};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Feat) -> Feat {
        let k = conv.k as isize;
        let p = k / 2;
        let mut y = Feat::zeros(conv.out_c, x.h, x.w);
        for o in 0..conv.out_c {
            for yy in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = conv.bias.value[o];
                    for ci in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy + ky - p;
                                let sx = xx + kx - p;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_c + ci) * conv.k + ky as usize) * conv.k
                                    + kx as usize;
                                acc += conv.weight.value[wi]
                                    * x.data[ci * x.hw() + sy as usize * x.w + sx as usize];
                            }
                        }
                    }
                    y.data[o * x.hw() + yy as usize * x.w + xx as usize] = acc;
                }
            }
        }
        y
    }

    fn random_feat(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Feat {
        Feat::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let mut conv = Conv2d::new(3, 4, k, 1.0, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_feat(3, 5, 7, &mut rng);
            let (y, _) = conv.forward(&x);
            let expect = naive_conv(&conv, &x);
            for (a, b) in y.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-4, "k={k}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let mut conv = Conv2d::new(2, 3, k, 1.0, &mut rng);
            let x = random_feat(2, 4, 5, &mut rng);
            let g = random_feat(3, 4, 5, &mut rng);
            let loss = |conv: &Conv2d, x: &Feat| -> f64 {
                let (y, _) = conv.forward(x);
                y.data.iter().zip(&g.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let (_, cache) = conv.forward(&x);
            conv.zero_grad();
            let dx = conv.backward(&cache, &g);
            for i in [0, 7, 13, x.data.len() - 1] {
                let num = numeric(
                    |v| loss(&conv, &Feat::from_vec(2, 4, 5, v.to_vec())),
                    &x.data,
                    i,
                    1e-2,
                );
                assert_close(dx.data[i] as f64, num, "dx");
            }
            let w0 = conv.weight.value.clone();
            for i in [0, 5, w0.len() - 1] {
                let num = numeric(
                    |v| {
                        let mut c = conv.clone();
                        c.weight.value = v.to_vec();
                        loss(&c, &x)
                    },
                    &w0,
                    i,
                    1e-2,
                );
                assert_close(conv.weight.grad[i] as f64, num, "dW");
            }
        }
    }
}
