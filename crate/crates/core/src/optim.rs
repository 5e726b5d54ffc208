//! Adam and the step-decay learning-rate schedule.

use crate::config::OptimConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Piecewise-constant schedule: `lr * decay^k` where `k` counts the
/// milestones already reached.
pub fn lr_at(epoch: u64, cfg: &OptimConfig) -> f64 {
    let k = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.decay_factor.powi(k as i32)
}

/// Adam with bias correction. Parameters and moments are kept at single
/// precision after every update.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_grad_norm: Option<f64>,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_grad_norm: cfg.clip_grad_norm,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        let scale = match self.clip_grad_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(i).and_then(Option::as_ref);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j] * scale);
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let mj = mj as f32 as f64;
                let vj = vj as f32 as f64;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let upd = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                p.data_mut()[j] = (p.data()[j] - upd) as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn schedule_values() {
        let c = OptimConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(29, &c), 1e-3);
        assert!(close(lr_at(30, &c), 2e-4));
        assert!(close(lr_at(49, &c), 2e-4));
        assert!(close(lr_at(50, &c), 4e-5));
        assert!(close(lr_at(80, &c), 8e-6));
        assert!(close(lr_at(149, &c), 8e-6));
        for e in 0..200 {
            assert!(lr_at(e + 1, &c) <= lr_at(e, &c));
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&OptimConfig::default(), &store);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -2.0]).unwrap();
        adam.step(&mut store, &[Some(g)], 0.125);
        let p = store.get(id).data();
        assert!((p[0] - 0.875).abs() < 1e-6 && (p[1] + 0.875).abs() < 1e-6);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::zeros([1, 1, 1, 1]));
        let cfg = OptimConfig {
            clip_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut adam = Adam::new(&cfg, &store);
        adam.step(&mut store, &[Some(Tensor::scalar(100.0))], 1e-3);
        assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-7);
    }
}
