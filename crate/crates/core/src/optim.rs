//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup/cosine learning-rate schedule.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: 1.0, warmup_frac: 0.03 }
    }
}

impl AdamWConfig {
    /// Learning rate at `step` (0-based) of `total`: linear warmup, then
    /// cosine decay to 10% of the peak.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let warm = (self.warmup_frac * total).ceil().max(1.0);
        let s = step as f64;
        if s < warm {
            return self.lr * (s + 1.0) / warm;
        }
        let progress = ((s - warm) / (total - warm).max(1.0)).min(1.0);
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Optimizer state for one ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with learning rate `lr`. Tensors with a single row (biases,
    /// norm gains) are not decayed.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch at tensor {i}");
            let decay = if p.rows() > 1 { (lr * c.weight_decay) as f32 } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                *pj -= decay * *pj;
                *pj -= step * *mj / (vj.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::from_vec(1, 2, vec![3.0, -2.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[&x]);
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            opt.step(vec![&mut x], &[g], 0.05);
        }
        assert!(x.max_abs() < 1e-2, "{:?}", x.data());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
        let mut h = vec![Tensor::from_vec(1, 2, vec![0.3, 0.4])];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = AdamWConfig { lr: 1.0, warmup_frac: 0.1, ..Default::default() };
        assert!(c.lr_at(0, 100) < c.lr_at(5, 100));
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-9);
        assert!((c.lr_at(99, 100) - 0.1).abs() < 1e-3);
    }
}
