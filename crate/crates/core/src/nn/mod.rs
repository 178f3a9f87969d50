//! Minimal CPU neural-network engine with hand-written backward passes.
//!
//! Everything operates on one sample at a time (`Feat`, channel-major `C×H×W`);
//! mini-batches are formed by accumulating gradients over samples before an
//! optimizer step. All kernels are single-threaded and deterministic.

mod attention;
mod conv;
mod layers;
mod optim;

pub use attention::{AttentionCache, CrossAttention};
pub use conv::{Conv2d, ConvCache};
pub use layers::{
    avg_pool2, avg_pool2_backward, max_pool2, max_pool2_backward, relu, relu_backward, silu,
    silu_backward, sinusoidal_embedding, upsample2, upsample2_backward, Linear,
};
pub use optim::{clip_grad_norm, Adam};

use rand::Rng;
use rand_distr::StandardNormal;

/// A single feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature buffer does not match shape");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn add_assign(&mut self, other: &Feat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Feat) -> Feat {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Feat { c: self.c + other.c, h: self.h, w: self.w, data }
    }

    /// Inverse of [`Feat::concat`] for gradients: split after `first` channels.
    pub fn split(&self, first: usize) -> (Feat, Feat) {
        let cut = first * self.hw();
        (
            Feat::from_vec(first, self.h, self.w, self.data[..cut].to_vec()),
            Feat::from_vec(self.c - first, self.h, self.w, self.data[cut..].to_vec()),
        )
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// Kaiming-normal initialisation with the given fan-in and gain.
    pub fn kaiming<R: Rng>(n: usize, fan_in: usize, gain: f32, rng: &mut R) -> Self {
        let std = gain * (1.0 / fan_in.max(1) as f32).sqrt();
        Self::new((0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters. Visiting order must be stable: it defines
/// the on-disk layout and the optimizer pairing.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    /// Flattened parameter values in visiting order.
    fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    /// Overwrite all parameter values; returns false on a length mismatch.
    fn load_flat(&mut self, values: &[f32]) -> bool {
        if values.len() != self.num_params() {
            return false;
        }
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        true
    }

    fn scale_grads(&mut self, s: f32) {
        self.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
}

/// Row-major `c = beta * c + op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta`, `a` is stored as `k×m`; with `tb`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
