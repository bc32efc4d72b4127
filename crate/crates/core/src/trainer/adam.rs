//! Adam with coupled L2 weight decay (`grad += wd · param`).

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Optimizer state; moments are kept in `f64` and sized lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.m.get(index).map(Vec::as_slice)
    }

    pub fn second_moment(&self, index: usize) -> Option<&[f64]> {
        self.v.get(index).map(Vec::as_slice)
    }

    /// One bias-corrected update of every trainable parameter. Refuses to
    /// touch anything if a gradient is NaN or infinite.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
            let bad = p.grad.data().iter().filter(|g| !g.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFinite(format!(
                    "gradient of {} has {bad} non-finite entries (of {}); step {} skipped",
                    p.name,
                    p.grad.len(),
                    self.step + 1
                )));
            }
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grads = p.grad.data().to_vec();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let wf = w.f64();
                let g = grads[k].f64() + weight_decay * wf;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *w = T::of(wf - update);
            }
        }
        Ok(())
    }
}
