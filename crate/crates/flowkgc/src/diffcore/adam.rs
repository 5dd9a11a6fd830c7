//! Adam optimizer state and update step.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// Per-parameter moment buffers plus hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Standard bias-corrected Adam update using the grads currently held
    /// in the store. Moment buffers are allocated lazily on first use.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.len() != params.len() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.get(super::ParamId(i)).value.len()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let p = params.get_mut(super::ParamId(i));
            for (j, g) in p.grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.value.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
