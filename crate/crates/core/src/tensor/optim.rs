//! Adam-style adaptive gradient descent with global-norm clipping.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step_count: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let first_moment = store
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let second_moment = store
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            cfg,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    /// Applies one update from the gradients currently stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let clip_scale = match self.cfg.grad_clip {
            Some(clip) => {
                let sq: f64 = store
                    .iter()
                    .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        for idx in 0..store.len() {
            let grad = store.grad(idx).scale(clip_scale);
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            for k in 0..grad.len() {
                let g = grad.data()[k];
                m.data_mut()[k] = self.cfg.beta1 * m.data()[k] + (1.0 - self.cfg.beta1) * g;
                v.data_mut()[k] = self.cfg.beta2 * v.data()[k] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m.data()[k] / bias1;
                let v_hat = v.data()[k] / bias2;
                let update = self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                store.value_mut(idx).data_mut()[k] -= update;
            }
        }
    }
}
