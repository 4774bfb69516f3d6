use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Classic L2 decay: `wd · p` is added to the gradient before the moment update.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that requires gradients, then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let trainable: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
        if let Some(&missing) = trainable.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(Error::usage(format!(
                "parameter `{}` has no gradient",
                store.name(missing)
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in trainable {
            let i = id.index();
            let p = store.get_mut(id);
            let grad = p.grad().unwrap().to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j] + c.weight_decay * data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                if c.learning_rate != 0.0 {
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
