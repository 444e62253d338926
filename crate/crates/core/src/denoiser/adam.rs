//! Bias-corrected Adam over a [`ParamStore`].

use super::tape::{Gradients, ParamStore};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per store entry (empty for frozen entries).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |e: &super::tape::ParamEntry| if e.trainable { vec![0.0; e.tensor.len()] } else { Vec::new() };
        Self {
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }
}

/// Applies one update. Fails without touching `store` if any updated value
/// would be non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if grads.len() != store.entries().len() {
        return Err(CoreError::Parameter("gradient count does not match parameters".into()));
    }
    let step = state.step + 1;
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    let mut new_m = state.m.clone();
    let mut new_v = state.v.clone();
    let mut updated: Vec<Option<Vec<f64>>> = Vec::with_capacity(grads.len());
    for (idx, (entry, g)) in store.entries().iter().zip(grads).enumerate() {
        let Some(g) = g else {
            updated.push(None);
            continue;
        };
        if !entry.trainable {
            return Err(CoreError::Parameter(format!("gradient supplied for frozen '{}'", entry.name)));
        }
        let (m, v) = (&mut new_m[idx], &mut new_v[idx]);
        let mut vals = entry.tensor.data.clone();
        for j in 0..vals.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            vals[j] -= config.lr * mhat / (vhat.sqrt() + config.eps);
            if !vals[j].is_finite() {
                return Err(CoreError::Training {
                    step: step as usize,
                    reason: format!("non-finite update for '{}'[{j}] (grad {})", entry.name, g[j]),
                });
            }
        }
        updated.push(Some(vals));
    }
    for (entry, vals) in store.entries_mut().iter_mut().zip(updated) {
        if let Some(vals) = vals {
            entry.tensor.data = vals;
        }
    }
    state.m = new_m;
    state.v = new_v;
    state.step = step;
    Ok(())
}
