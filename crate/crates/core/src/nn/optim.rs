use super::{Module, Param};

/// Adam with bias correction. Moment buffers live inside each [`Param`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        model.visit_mut(&mut |p: &mut Param| {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (1.0 - b1) * g;
                p.v[i] = b2 * p.v[i] + (1.0 - b2) * g * g;
                let mh = p.m[i] / bc1;
                let vh = p.v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm<M: Module + ?Sized>(model: &mut M, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    model.visit(&mut |p| sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        model.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Param);
    impl Module for Quad {
        fn visit(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut q = Quad(Param::new(vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            q.zero_grad();
            for i in 0..2 {
                q.0.grad[i] = 2.0 * (q.0.value[i] - 1.0);
            }
            opt.step(&mut q);
        }
        assert!(q.0.value.iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut q = Quad(Param::new(vec![0.0, 0.0]));
        q.0.grad = vec![3.0, 4.0];
        let n = clip_grad_norm(&mut q, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((q.0.grad[0] - 0.6).abs() < 1e-6 && (q.0.grad[1] - 0.8).abs() < 1e-6);
    }
}
