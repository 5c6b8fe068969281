use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Moments start at zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<Scalar>>,
    v: Vec<Vec<Scalar>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<Scalar>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` pairs with the i-th parameter of
    /// `store`; `None` entries are treated as zero gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<Scalar>>]) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient count != parameter count"
        );
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as Scalar, c.beta2 as Scalar);
        let step_size = (c.lr / bc1) as Scalar;
        let inv_bc2 = (1.0 / bc2) as Scalar;
        let eps = c.eps as Scalar;
        for (((param, grad), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let data = param.value.data_mut();
            match grad {
                Some(g) => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..data.len() {
                        m[i] *= b1;
                        v[i] *= b2;
                        data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
