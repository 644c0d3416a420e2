//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: BTreeMap<ParamId, AdamState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, state: BTreeMap::new() })
    }

    /// Updates each listed parameter; parameters without a gradient this
    /// step are left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let st = self.state.entry(*id).or_insert_with(|| AdamState {
                step: 0,
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let it = p.data_mut().iter_mut().zip(g.data()).zip(st.m.data_mut().iter_mut().zip(st.v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *p *= 1.0 - lr * weight_decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(coef);
        }
    }
    norm
}
