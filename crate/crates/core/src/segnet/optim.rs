//! Adam with decoupled weight decay and the polynomial learning-rate decay.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::segnet::params::ParamStore;
use crate::tensor::Tensor;

/// `base * (1 - epoch / total)^power`, zero from `epoch >= total` on.
pub fn poly_lr(base: f64, epoch: usize, total: usize, power: f64) -> f64 {
    if total == 0 || epoch >= total {
        return 0.0;
    }
    base * libm::pow(1.0 - epoch as f64 / total as f64, power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-4,
        }
    }
}

/// Moment estimates are kept for every store entry (empty for running
/// statistics) so they can be addressed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || -> Vec<Option<Tensor<T>>> {
            store
                .iter()
                .map(|p| match p.kind {
                    super::params::ParamKind::Trainable => Some(Tensor::zeros_like(&p.value)),
                    super::params::ParamKind::Running => None,
                })
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps))`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(usize, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(*i).and_then(Option::as_mut), self.v.get_mut(*i).and_then(Option::as_mut))
            else {
                return Err(invalid!("parameter {} has no optimizer state", i));
            };
            let p = store.value_mut(*i);
            if p.shape() != g.shape() {
                return Err(invalid!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gv.as_f64();
                let mf = c.beta1 * mv.as_f64() + (1.0 - c.beta1) * gf;
                let vf = c.beta2 * vv.as_f64() + (1.0 - c.beta2) * gf * gf;
                *mv = T::from_f64(mf);
                *vv = T::from_f64(vf);
                let update = mf / bc1 / (libm::sqrt(vf / bc2) + c.eps);
                let pf = pv.as_f64();
                *pv = T::from_f64(pf - lr * (c.weight_decay * pf + update));
            }
        }
        Ok(())
    }
}
