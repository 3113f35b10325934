//! Sparse mixture-of-experts conditioning layer.
//!
//! A bias-free linear router produces softmax probabilities over `N`
//! experts; the output is `Σ_{i ∈ TopK} g_i·E_i(z)` with the raw (not
//! renormalised) gate values unless configured otherwise. Experts that no
//! sample selects are never evaluated, and a selected expert only sees the
//! rows routed to it.

mod gate;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use gate::{
    argmax, auxiliary_loss, batch_stats, entropy_loss, load_balance_loss, top_k, AuxLoss,
    BatchGateStats, GateDecision,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub feature_dim: usize,
    pub expert_hidden_dim: usize,
    pub lambda_load: f64,
    pub beta_entropy: f64,
    pub eps_stability: f64,
    pub renormalize_topk: bool,
    /// Count every selected expert (each with weight `1/top_k`) as
    /// dispatched instead of only the argmax.
    pub count_all_selected: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 16,
            top_k: 2,
            feature_dim: 64,
            expert_hidden_dim: 64,
            lambda_load: 0.1,
            beta_entropy: 0.01,
            eps_stability: 1e-8,
            renormalize_topk: false,
            count_all_selected: false,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.lambda_load >= 0.0 && self.beta_entropy >= 0.0) {
            return Err(Error::Config(
                "lambda_load and beta_entropy must be >= 0".into(),
            ));
        }
        if !(self.eps_stability > 0.0) {
            return Err(Error::Config("eps_stability must be > 0".into()));
        }
        if self.feature_dim == 0 || self.expert_hidden_dim == 0 {
            return Err(Error::Config(
                "feature and hidden dims must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub config: MoeConfig,
    /// `[feature_dim × N]`, no bias.
    pub router: ParamId,
    pub experts: Vec<Mlp>,
}

/// Result of routing a `[B × feature_dim]` batch.
#[derive(Clone, Debug)]
pub struct RouteOutput {
    /// `[B × feature_dim]` combined expert output.
    pub output: Var,
    /// `[B × N]` router probabilities.
    pub probs: Var,
    pub decisions: Vec<GateDecision>,
}

impl MoeLayer {
    /// Registers `{name}.router` and `{name}.expert{i}.{0,1}` in `store`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.feature_dim, config.num_experts);
        let bound = 1.0 / (d as f64).sqrt();
        let w: Vec<f64> = (0..d * n)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let router = store.register(format!("{name}.router"), Tensor::new(vec![d, n], w)?);
        let experts = (0..n)
            .map(|i| {
                Mlp::new(
                    store,
                    &format!("{name}.expert{i}"),
                    &[d, config.expert_hidden_dim, d],
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            router,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    /// Routes a batch. `forced`, when given, holds one entry per sample;
    /// `Some(j)` replaces that sample's combination with weight 1.0 on
    /// expert `j` while its probabilities stay as the router produced them.
    pub fn route(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        forced: Option<&[Option<usize>]>,
    ) -> Result<RouteOutput> {
        let shape = g.tape.shape(z).to_vec();
        let (d, n, k) = (
            self.config.feature_dim,
            self.config.num_experts,
            self.config.top_k,
        );
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dim("moe.route", &shape, &[0, d]));
        }
        if g.tape.value(z).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite router input".into()));
        }
        let b = shape[0];
        if let Some(f) = forced {
            if f.len() != b {
                return Err(Error::Contract(format!(
                    "override list has {} entries for a batch of {b}",
                    f.len()
                )));
            }
            if let Some(j) = f.iter().flatten().find(|&&j| j >= n) {
                return Err(Error::Contract(format!(
                    "override names expert {j} but the layer has {n}"
                )));
            }
        }
        let forced_of = |row: usize| forced.and_then(|f| f[row]);

        let wg = g.param(self.router);
        let logits = g.tape.matmul(z, wg)?;
        let probs = g.tape.softmax(logits)?;

        // Decisions, a mask selecting the router-weighted entries and a
        // constant for forced entries.
        let pv = g.tape.value(probs).clone();
        let mut mask = vec![0.0; b * n];
        let mut fixed = vec![0.0; b * n];
        let mut decisions = Vec::with_capacity(b);
        for row in 0..b {
            let p = pv.row(row).to_vec();
            let decision = match forced_of(row) {
                Some(j) => {
                    fixed[row * n + j] = 1.0;
                    GateDecision {
                        probabilities: p,
                        selected: vec![j],
                        combine_weights: vec![1.0],
                        overridden: true,
                    }
                }
                None => {
                    let sel = top_k(&p, k);
                    let mut w: Vec<f64> = sel.iter().map(|&i| p[i]).collect();
                    if self.config.renormalize_topk {
                        let s: f64 = w.iter().sum();
                        w.iter_mut().for_each(|x| *x /= s);
                    }
                    for &i in &sel {
                        mask[row * n + i] = 1.0;
                    }
                    GateDecision {
                        probabilities: p,
                        selected: sel,
                        combine_weights: w,
                        overridden: false,
                    }
                }
            };
            decisions.push(decision);
        }

        let mask_v = g.tape.constant(Tensor::new(vec![b, n], mask.clone())?);
        let mut weights = g.tape.mul(probs, mask_v)?;
        if self.config.renormalize_topk {
            // rows without router-selected experts get a harmless unit sum
            let ones_n = g.tape.constant(Tensor::ones(&[n, 1]));
            let sums = g.tape.matmul(weights, ones_n)?;
            let pad: Vec<f64> = (0..b)
                .map(|r| if forced_of(r).is_some() { 1.0 } else { 0.0 })
                .collect();
            let pad = g.tape.constant(Tensor::new(vec![b, 1], pad)?);
            let sums = g.tape.add(sums, pad)?;
            let logs = g.tape.log(sums)?;
            let neg = g.tape.scale(logs, -1.0)?;
            let inv = g.tape.exp(neg);
            weights = g.tape.scale_rows(weights, inv)?;
        }
        if forced.is_some_and(|f| f.iter().any(Option::is_some)) {
            let fixed_v = g.tape.constant(Tensor::new(vec![b, n], fixed.clone())?);
            weights = g.tape.add(weights, fixed_v)?;
        }

        // Rows routed to each expert.
        let mut rows_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, dcs) in decisions.iter().enumerate() {
            for &i in &dcs.selected {
                rows_of.entry(i).or_default().push(row);
            }
        }

        let mut output: Option<Var> = None;
        for (&i, rows) in &rows_of {
            let w_i = g.tape.slice(weights, i, i + 1)?;
            let contribution = if rows.len() == b {
                let y = self.experts[i].forward(g, z)?;
                g.tape.scale_rows(y, w_i)?
            } else {
                let m = rows.len();
                let mut sel = vec![0.0; m * b];
                for (r, &row) in rows.iter().enumerate() {
                    sel[r * b + row] = 1.0;
                }
                let scatter_t = transpose(&sel, m, b);
                let gather = g.tape.constant(Tensor::new(vec![m, b], sel)?);
                let scatter = g.tape.constant(Tensor::new(vec![b, m], scatter_t)?);
                let zi = g.tape.matmul(gather, z)?;
                let wi = g.tape.matmul(gather, w_i)?;
                let y = self.experts[i].forward(g, zi)?;
                let yw = g.tape.scale_rows(y, wi)?;
                g.tape.matmul(scatter, yw)?
            };
            output = Some(match output {
                Some(acc) => g.tape.add(acc, contribution)?,
                None => contribution,
            });
        }
        let output = output.expect("every sample selects at least one expert");
        Ok(RouteOutput {
            output,
            probs,
            decisions,
        })
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
