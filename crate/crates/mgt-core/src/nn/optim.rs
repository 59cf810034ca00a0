//! AdamW with decoupled weight decay.

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers mirror the parameter set they were created for.
pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, ps: &ParamSet<F>) -> Self {
        let m = ps
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let v = ps
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters from their accumulated grads. Weight
    /// decay is applied directly to values, not through the moments.
    pub fn step(&mut self, ps: &mut ParamSet<F>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = F::from_f64(self.cfg.lr);
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let one = F::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let decay = F::from_f64(self.cfg.lr * self.cfg.weight_decay);

        for (slot, id) in ps.ids().into_iter().enumerate() {
            let p = ps.get_mut(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.value.len() {
                let g = p.grad.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * g;
                let vi = b2 * v.data()[i] + (one - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let w = p.value.data()[i];
                p.value.data_mut()[i] = w - decay * w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
