//! Per-sample gate decisions, batch statistics and the auxiliary losses.

use serde::{Deserialize, Serialize};

use crate::diffkit::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::MoeConfig;

/// Router output for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Softmax probabilities before any override.
    pub probabilities: Vec<f64>,
    /// Experts whose outputs are combined, in descending probability.
    pub selected: Vec<usize>,
    /// Weight applied to each entry of `selected`.
    pub combine_weights: Vec<f64>,
    pub overridden: bool,
}

impl GateDecision {
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    /// Shannon entropy of the router distribution in nats.
    pub fn entropy(&self) -> f64 {
        self.probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Dense combine-weight vector over all experts.
    pub fn weight_vector(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.probabilities.len()];
        for (&i, &c) in self.selected.iter().zip(&self.combine_weights) {
            w[i] = c;
        }
        w
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The `k` largest entries in descending order, ties toward lower indices.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchGateStats {
    /// Fraction of samples dispatched to each expert.
    pub dispatch_fraction: Vec<f64>,
    /// Mean router probability of each expert.
    pub mean_probability: Vec<f64>,
    pub batch_size: usize,
}

/// Dispatch fractions and mean probabilities of a batch.
///
/// A sample is dispatched to its argmax expert only, unless
/// `count_all_selected`, in which case each of its `top_k` experts receives
/// `1/top_k`. Both use the pre-override probabilities.
pub fn batch_stats(
    decisions: &[GateDecision],
    top_k_count: usize,
    count_all_selected: bool,
) -> Result<BatchGateStats> {
    let Some(first) = decisions.first() else {
        return Err(Error::Contract("batch_stats on an empty batch".into()));
    };
    let n = first.probabilities.len();
    if let Some(d) = decisions.iter().find(|d| d.probabilities.len() != n) {
        return Err(Error::Contract(format!(
            "gate decisions disagree on expert count: {n} vs {}",
            d.probabilities.len()
        )));
    }
    let b = decisions.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for d in decisions {
        if count_all_selected {
            let k = top_k_count.clamp(1, n);
            for i in top_k(&d.probabilities, k) {
                f[i] += 1.0 / (b * k as f64);
            }
        } else {
            f[d.argmax()] += 1.0 / b;
        }
        for (acc, &pi) in p.iter_mut().zip(&d.probabilities) {
            *acc += pi;
        }
    }
    p.iter_mut().for_each(|x| *x /= b);
    Ok(BatchGateStats {
        dispatch_fraction: f,
        mean_probability: p,
        batch_size: decisions.len(),
    })
}

/// `N·Σ f_i·P_i` on the tape, differentiable through the `[B × N]`
/// probabilities only.
pub fn load_balance_loss(tape: &mut Tape, probs: Var, stats: &BatchGateStats) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let n = stats.dispatch_fraction.len();
    if shape.len() != 2 || shape[1] != n {
        return Err(Error::dim(
            "load_balance_loss",
            &shape,
            &[stats.batch_size, n],
        ));
    }
    let f = tape.constant(Tensor::new(vec![n, 1], stats.dispatch_fraction.clone())?);
    let per_sample = tape.matmul(probs, f)?;
    let total = tape.sum(per_sample);
    tape.scale(total, n as f64 / shape[0] as f64)
}

/// Mean router entropy `−(1/B)·Σ_t Σ_i p·log(p + ε)` on the tape.
pub fn entropy_loss(tape: &mut Tape, probs: Var, eps: f64) -> Result<Var> {
    let b = tape.value(probs).rows();
    let e = tape.constant(Tensor::scalar(eps));
    let shifted = tape.add(probs, e)?;
    let logs = tape.log(shifted)?;
    let plogp = tape.mul(probs, logs)?;
    let total = tape.sum(plogp);
    tape.scale(total, -1.0 / b as f64)
}

/// Auxiliary loss components for one batch.
#[derive(Clone, Copy, Debug)]
pub struct AuxLoss {
    /// `λ·L_load + β·L_entropy`.
    pub total: Var,
    pub l_load: f64,
    pub l_entropy: f64,
}

/// `λ·L_load + β·L_entropy` with the configured weights.
pub fn auxiliary_loss(
    tape: &mut Tape,
    probs: Var,
    stats: &BatchGateStats,
    config: &MoeConfig,
) -> Result<AuxLoss> {
    let load = load_balance_loss(tape, probs, stats)?;
    let ent = entropy_loss(tape, probs, config.eps_stability)?;
    let wl = tape.scale(load, config.lambda_load)?;
    let we = tape.scale(ent, config.beta_entropy)?;
    let total = tape.add(wl, we)?;
    Ok(AuxLoss {
        total,
        l_load: tape.value(load).item(),
        l_entropy: tape.value(ent).item(),
    })
}
