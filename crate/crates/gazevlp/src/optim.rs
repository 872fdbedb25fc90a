//! AdamW with decoupled weight decay, plus a reduce-on-plateau scheduler.

use serde::{Deserialize, Serialize};

use crate::param::ParamSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    /// First/second moment buffers aligned with parameter registration order.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> AdamW {
        let moments = params
            .iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .collect();
        AdamW {
            cfg,
            step_count: 0,
            moments,
        }
    }

    /// One update over all parameters that received a gradient. Parameters
    /// with no gradient this step are left untouched, moments included.
    pub fn step(&mut self, params: &ParamSet, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let (m, v) = &mut self.moments[i];
            let mut data = p.data();
            for j in 0..data.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * grad[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[j]);
            }
            p.set_data(data);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Serializable view of the optimizer state: (step_count, per-parameter
    /// first and second moments in registration order).
    pub fn state(&self) -> (u64, &[(Vec<f64>, Vec<f64>)]) {
        (self.step_count, &self.moments)
    }

    pub fn restore(&mut self, step_count: u64, moments: Vec<(Vec<f64>, Vec<f64>)>) {
        assert_eq!(moments.len(), self.moments.len(), "optimizer state size mismatch");
        self.step_count = step_count;
        self.moments = moments;
    }
}

/// Halves (or scales by `factor`) the learning rate after `patience` epochs
/// without validation improvement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> PlateauScheduler {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
