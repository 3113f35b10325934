//! Variance-preserving noise schedule and forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `sqrt(1 − alpha_bar_k)`.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas; fails unless beta, alpha_bar and sigma are
    /// strictly monotone inside (0, 1).
    pub fn linear(config: &ScheduleConfig) -> Result<Self> {
        let k = config.num_steps;
        if k < 2 {
            return Err(Error::Config(format!(
                "need at least 2 diffusion steps, got {k}"
            )));
        }
        let beta: Vec<f64> = (0..k)
            .map(|i| {
                config.beta_start
                    + (config.beta_end - config.beta_start) * i as f64 / (k - 1) as f64
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(k);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sigma: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let inc = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        let in_unit = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x < 1.0);
        if !(inc(&beta) && in_unit(&beta) && in_unit(&alpha_bar) && inc(&sigma)) {
            return Err(Error::Config(format!(
                "beta range [{}, {}] does not give a strictly monotone schedule",
                config.beta_start, config.beta_end
            )));
        }
        Ok(Self {
            num_steps: k,
            beta,
            alpha_bar,
            sigma,
        })
    }

    /// `sqrt(ᾱ_k)·a0 + sqrt(1 − ᾱ_k)·ε`.
    pub fn add_noise(&self, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if k >= self.num_steps {
            return Err(Error::Contract(format!(
                "diffusion step {k} outside [0, {})",
                self.num_steps
            )));
        }
        if a0.len() != eps.len() {
            return Err(Error::dim("add_noise", &[a0.len()], &[eps.len()]));
        }
        let s = self.alpha_bar[k].sqrt();
        let n = self.sigma[k];
        Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
    }

    /// One ancestral step from `x_k` given a noise prediction, with the
    /// implied clean sample clipped to `[-1, 1]`. `z` is ignored at `k = 0`.
    pub fn ancestral_step(&self, x: &mut [f64], eps_hat: &[f64], k: usize, z: &[f64]) {
        let ab = self.alpha_bar[k];
        let ab_prev = if k > 0 { self.alpha_bar[k - 1] } else { 1.0 };
        let beta = self.beta[k];
        let alpha = 1.0 - beta;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let std = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for i in 0..x.len() {
            let x0 = ((x[i] - (1.0 - ab).sqrt() * eps_hat[i]) / ab.sqrt()).clamp(-1.0, 1.0);
            let mean = c0 * x0 + ck * x[i];
            x[i] = if k > 0 { mean + std * z[i] } else { mean };
        }
    }
}
