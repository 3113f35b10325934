//! Adam optimiser and exponential moving average of weights.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One bias-corrected Adam update; clears the gradients afterwards.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {i} has no gradient")));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let g = p.grad().expect("checked above").to_vec();
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        p.clear_grad();
    }
    Ok(())
}

/// Adam over every tensor of a store.
pub fn adam_step_store(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    adam_step(store.tensors_mut(), state)
}

/// Exponential moving average of a parameter store.
///
/// The effective decay at update `t` is `min(decay, (1 + t) / (10 + t))`,
/// so early averages are not dominated by the random initialisation.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub updates: u64,
    pub shadow: ParamStore,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Self {
            decay,
            updates: 0,
            shadow: store.clone(),
        }
    }

    pub fn current_decay(&self) -> f64 {
        let t = self.updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, store: &ParamStore) {
        let d = self.current_decay();
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(store.tensors()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
    }
}
