//! Adam optimizer over a parameter store, with serializable moment state.

use std::collections::HashMap;

use crate::autodiff::graph::{ParamId, ParamStore};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to `ids` using the gradients currently stored on
    /// their tensors. Parameters without a gradient slot are skipped: under
    /// sparse routing an expert no row was routed to never enters the tape,
    /// and its weights and moments stay put. If *none* of the ids carry a
    /// gradient the caller forgot to run a backward pass, which is a
    /// contract error.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(CoreError::Contract(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !ids.is_empty() && ids.iter().all(|&id| store.tensor(id).grad.is_none()) {
            return Err(CoreError::Contract(
                "no parameter in this step has a gradient; run backward first".into(),
            ));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for &id in ids {
            let n = store.tensor(id).numel();
            let grad = match store.tensor(id).grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let tensor = store.tensor_mut(id);
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.values[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Moment arrays keyed by parameter name, for checkpointing.
    pub fn export_state(&self, store: &ParamStore) -> AdamState {
        let mut moments: Vec<(String, Vec<f64>, Vec<f64>)> = self
            .m
            .iter()
            .map(|(&id, m)| {
                let v = self.v.get(&id).cloned().unwrap_or_default();
                (store.name(id).to_string(), m.clone(), v)
            })
            .collect();
        moments.sort_by(|a, b| a.0.cmp(&b.0));
        AdamState {
            beta1: self.beta1,
            beta2: self.beta2,
            step: self.step,
            moments,
        }
    }

    pub fn restore_state(state: &AdamState, store: &ParamStore) -> Result<Self> {
        let mut adam = Adam::new(state.beta1, state.beta2);
        adam.step = state.step;
        for (name, m, v) in &state.moments {
            let id = store.id(name).ok_or_else(|| {
                CoreError::Contract(format!("optimizer state names unknown parameter `{name}`"))
            })?;
            if m.len() != store.tensor(id).numel() {
                return Err(CoreError::Shape(format!(
                    "optimizer moment for `{name}` has {} values, parameter has {}",
                    m.len(),
                    store.tensor(id).numel()
                )));
            }
            adam.m.insert(id, m.clone());
            adam.v.insert(id, v.clone());
        }
        Ok(adam)
    }
}

/// Flattened optimizer state as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}
