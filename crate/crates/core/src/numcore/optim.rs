use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

/// Adam / AdamW with bias correction. AdamW applies decoupled weight decay
/// (`p ← p·(1 − lr·wd)`) before the moment update.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Adam, learning_rate, 0.0)
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::AdamW, learning_rate, weight_decay)
    }

    fn with_kind(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held in `store`. A non-finite
    /// gradient anywhere rejects the whole step.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            if !store.grad(id).all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = match self.kind {
            OptimizerKind::Adam => 1.0,
            OptimizerKind::AdamW => 1.0 - self.learning_rate * self.weight_decay,
        };
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if m.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "moment buffer for `{}` has wrong length",
                    store.name(id)
                )));
            }
            let p = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] = p[j] * decay - self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
