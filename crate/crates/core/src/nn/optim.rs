use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 64,
            lr_milestones: vec![20],
            lr_decay: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NnError::Config(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr decay must be positive, got {}", self.lr_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu v + g + wd theta`, `theta <- theta - lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one update. Every trainable parameter in `store` must have a
    /// gradient in `grads`; the gradients are consumed.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: Vec<(usize, Tensor)>,
        lr: f64,
        cfg: &SgdConfig,
    ) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut by_index: Vec<Option<Tensor>> = vec![None; store.len()];
        for (i, g) in grads {
            by_index[i] = Some(g);
        }
        for i in store.trainable_indices() {
            let g = by_index[i]
                .take()
                .ok_or_else(|| NnError::MissingGradient(store.entry(i).name.clone()))?;
            if g.shape() != store.entry(i).tensor.shape() {
                return Err(NnError::Config(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    store.entry(i).name,
                    g.shape(),
                    store.entry(i).tensor.shape()
                )));
            }
            let theta = store.tensor_mut(i).data_mut();
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; theta.len()]);
            for ((t, vel), &gr) in theta.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = cfg.momentum * *vel + gr + cfg.weight_decay * *t;
                *t -= lr * *vel;
            }
        }
        Ok(())
    }
}
