//! Adam with bias correction and per-group learning rates.

use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamStore};
use crate::tensor::{s, Scalar};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Rate for [`ParamGroup::Backbone`] parameters.
    pub backbone_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, backbone_learning_rate: learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn rate(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Primary => self.learning_rate,
            ParamGroup::Backbone => self.backbone_learning_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.backbone_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Ok(OptimizerState { config, first: zeros(), second: zeros(), step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of every trainable parameter. Frozen parameters are
    /// skipped; a trainable parameter without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::Contract(format!("optimizer step without gradient for {}", p.name)));
        }
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameter store".into()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (s::<T>(c.beta1), s::<T>(c.beta2), s::<T>(c.eps));
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let lr = s::<T>(c.rate(p.group));
            let g = p.grad.as_ref().expect("checked above").data().to_vec();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / s(bc1);
                let vhat = v[i] / s(bc2);
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
