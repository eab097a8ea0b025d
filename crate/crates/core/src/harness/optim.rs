//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; `grads[i]` belongs to parameter `i`. Frozen parameters
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let g = &grads[i];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= c.lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[1.0, -2.0])).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, &[Tensor::row(&[0.5, -3.0])]).unwrap();
        // bias-corrected first step is lr · sign(g) up to eps
        let w = store.values()[0].data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[2.0])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Tensor::row(&[0.0])]).unwrap();
        assert!((store.values()[0].item() - (2.0 - 1e-3 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[3.0, -4.0])).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let g = store.values()[0].map(|x| 2.0 * x);
            opt.step(&mut store, &[g]).unwrap();
        }
        assert!(store.values()[0].frobenius_norm() < 1e-2);
    }

    #[test]
    fn frozen_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0])).unwrap();
        store.set_frozen(id, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[Tensor::row(&[1.0])]).unwrap();
        assert_eq!(store.values()[0].item(), 1.0);
    }
}
