use super::{gemm, Feat, Module, Param};
use rand::Rng;

/// Multi-head cross-attention from spatial features (queries) to a fixed
/// token context (keys/values), with a residual connection.
///
/// `y = x + W_o · concat_h(softmax(Q_h K_hᵀ / √d) V_h) + b_o`
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub channels: usize,
    pub context_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bo: Param,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Feat,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Per head, row-stochastic `HW × L`.
    pub probs: Vec<Vec<f32>>,
    o: Vec<f32>,
    tokens: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        channels: usize,
        context_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = heads * head_dim;
        Self {
            channels,
            context_dim,
            heads,
            head_dim,
            wq: Param::kaiming(d * channels, channels, 1.0, rng),
            wk: Param::kaiming(d * context_dim, context_dim, 1.0, rng),
            wv: Param::kaiming(d * context_dim, context_dim, 1.0, rng),
            wo: Param::kaiming(channels * d, d, 0.5, rng),
            bo: Param::zeros(channels),
        }
    }

    fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `context` is row-major `tokens × context_dim`.
    pub fn forward(&self, x: &Feat, context: &[f32]) -> (Feat, AttentionCache) {
        assert_eq!(x.c, self.channels);
        let tokens = context.len() / self.context_dim;
        assert!(tokens > 0 && tokens * self.context_dim == context.len(), "bad context shape");
        let (hw, c, d, e, dh) = (x.hw(), self.channels, self.inner(), self.context_dim, self.head_dim);
        let mut q = vec![0.0; d * hw];
        gemm(d, c, hw, &self.wq.value, false, &x.data, false, &mut q, 0.0);
        let mut k = vec![0.0; d * tokens];
        gemm(d, e, tokens, &self.wk.value, false, context, true, &mut k, 0.0);
        let mut v = vec![0.0; d * tokens];
        gemm(d, e, tokens, &self.wv.value, false, context, true, &mut v, 0.0);

        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = Vec::with_capacity(self.heads);
        let mut o = vec![0.0; d * hw];
        for h in 0..self.heads {
            let qh = &q[h * dh * hw..(h + 1) * dh * hw];
            let kh = &k[h * dh * tokens..(h + 1) * dh * tokens];
            let vh = &v[h * dh * tokens..(h + 1) * dh * tokens];
            let mut p = vec![0.0; hw * tokens];
            gemm(hw, dh, tokens, qh, true, kh, false, &mut p, 0.0);
            for row in p.chunks_mut(tokens) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut sum = 0.0;
                for val in row.iter_mut() {
                    *val = (*val * scale - mx).exp();
                    sum += *val;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|val| *val *= inv);
            }
            gemm(dh, tokens, hw, vh, false, &p, true, &mut o[h * dh * hw..(h + 1) * dh * hw], 0.0);
            probs.push(p);
        }
        let mut y = x.clone();
        for (ch, chunk) in y.data.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|val| *val += self.bo.value[ch]);
        }
        gemm(c, d, hw, &self.wo.value, false, &o, false, &mut y.data, 1.0);
        let cache = AttentionCache { input: x.clone(), q, k, v, probs, o, tokens };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &AttentionCache, context: &[f32], dy: &Feat) -> Feat {
        let x = &cache.input;
        let (hw, c, d, e, dh, tokens) =
            (x.hw(), self.channels, self.inner(), self.context_dim, self.head_dim, cache.tokens);
        let scale = 1.0 / (dh as f32).sqrt();

        for (ch, chunk) in dy.data.chunks(hw).enumerate() {
            self.bo.grad[ch] += chunk.iter().sum::<f32>();
        }
        gemm(c, hw, d, &dy.data, false, &cache.o, true, &mut self.wo.grad, 1.0);
        let mut d_o = vec![0.0; d * hw];
        gemm(d, c, hw, &self.wo.value, true, &dy.data, false, &mut d_o, 0.0);

        let mut dq = vec![0.0; d * hw];
        let mut dk = vec![0.0; d * tokens];
        let mut dv = vec![0.0; d * tokens];
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let doh = &d_o[h * dh * hw..(h + 1) * dh * hw];
            let qh = &cache.q[h * dh * hw..(h + 1) * dh * hw];
            let kh = &cache.k[h * dh * tokens..(h + 1) * dh * tokens];
            let vh = &cache.v[h * dh * tokens..(h + 1) * dh * tokens];
            gemm(dh, hw, tokens, doh, false, p, false, &mut dv[h * dh * tokens..(h + 1) * dh * tokens], 0.0);
            let mut dp = vec![0.0; hw * tokens];
            gemm(hw, dh, tokens, doh, true, vh, false, &mut dp, 0.0);
            for (drow, prow) in dp.chunks_mut(tokens).zip(p.chunks(tokens)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (dv_, pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            gemm(dh, tokens, hw, kh, false, &dp, true, &mut dq[h * dh * hw..(h + 1) * dh * hw], 0.0);
            gemm(dh, hw, tokens, qh, false, &dp, false, &mut dk[h * dh * tokens..(h + 1) * dh * tokens], 0.0);
        }
        gemm(d, hw, c, &dq, false, &x.data, true, &mut self.wq.grad, 1.0);
        gemm(d, tokens, e, &dk, false, context, false, &mut self.wk.grad, 1.0);
        gemm(d, tokens, e, &dv, false, context, false, &mut self.wv.grad, 1.0);
        let mut dx = dy.clone();
        gemm(c, d, hw, &self.wq.value, true, &dq, false, &mut dx.data, 1.0);
        dx
    }
}

impl Module for CrossAttention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wo);
        f(&self.bo);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
        f(&mut self.bo);
    }
}
