use serde::{Deserialize, Serialize};

use crate::model::{ParamEntry, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← θ − η·∇`.
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Iteration counter plus Adam moments, aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub iteration: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        OptimState {
            iteration: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Updates trainable parameters in place; a missing gradient counts as zero.
    /// Frozen parameters are never written.
    pub fn apply(&mut self, cfg: &OptimizerConfig, params: &mut [ParamEntry], grads: &[Option<&[f64]>]) {
        let t = self.iteration + 1;
        for (k, entry) in params.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let Some(g) = grads[k] else { continue };
                    for (w, g) in entry.value.data_mut().iter_mut().zip(g) {
                        *w -= cfg.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - cfg.beta1.powi(t as i32);
                    let c2 = 1.0 - cfg.beta2.powi(t as i32);
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let data = entry.value.data_mut();
                    for i in 0..data.len() {
                        let g = grads[k].map_or(0.0, |g| g[i]);
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                        data[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                    }
                }
            }
        }
        self.iteration = t;
    }
}
