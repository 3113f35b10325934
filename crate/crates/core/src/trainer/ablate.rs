//! Auxiliary-loss ablation: every variant trained and evaluated per seed.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    evaluate, train_with_hook, AblationVariant, Condition, Dataset, PolicyController, TrainConfig,
};
use crate::blockworld::TaskSpec;
use crate::error::Result;
use crate::policy::PolicyNets;
use crate::steer::ExpertStageMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub steps: usize,
    pub train_seconds: f64,
    /// Best success rate over all snapshots.
    pub nominal_success: f64,
    pub disturbed_success: f64,
    /// Success rates of the final snapshot.
    pub final_nominal_success: f64,
    pub final_disturbed_success: f64,
    /// Experts that were argmax-selected at least once in the final
    /// evaluation (both conditions).
    pub distinct_experts: usize,
    pub mean_gate_entropy: f64,
    /// Stage purity of the final nominal evaluation.
    pub purity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: AblationVariant,
    pub runs: usize,
    pub nominal_success: f64,
    pub disturbed_success: f64,
    pub mean_distinct_experts: f64,
    pub max_distinct_experts: usize,
    pub mean_gate_entropy: f64,
    pub mean_purity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    /// EMA networks of each row, in row order.
    #[serde(skip)]
    pub models: Vec<PolicyNets>,
}

impl AblationTable {
    pub fn model(&self, variant: AblationVariant, seed: u64) -> Option<&PolicyNets> {
        self.rows
            .iter()
            .position(|r| r.variant == variant && r.seed == seed)
            .map(|i| &self.models[i])
    }

    pub fn summary_of(&self, variant: AblationVariant) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

/// Trains `base` under each variant and seed; evaluates the EMA weights at
/// every snapshot with `num_eval_rollouts` nominal and disturbed rollouts.
/// Runs are written below `out_dir/<variant>-seed<seed>` when given.
pub fn ablate(
    base: &TrainConfig,
    task: &TaskSpec,
    dataset: &Dataset,
    variants: &[AblationVariant],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let config = TrainConfig {
                ablation_variant: variant,
                ..base.clone()
            };
            let dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", variant.name())));
            let started = Instant::now();
            let mut best = (0.0f64, 0.0f64);
            let mut last = None;
            let outcome = train_with_hook(&config, dataset, seed, dir.as_deref(), |ck| {
                let controller = PolicyController::new(ck.ema);
                let n = config.num_eval_rollouts;
                let nominal = evaluate(&controller, task, Condition::Nominal, n, &[seed])?;
                let disturbed = evaluate(&controller, task, Condition::Disturbed, n, &[seed])?;
                best.0 = best.0.max(nominal.success_rate);
                best.1 = best.1.max(disturbed.success_rate);
                log::info!(
                    "{} seed {seed} epoch {}: nominal {:.2} disturbed {:.2}",
                    variant.name(),
                    ck.epoch,
                    nominal.success_rate,
                    disturbed.success_rate
                );
                last = Some((nominal, disturbed));
                Ok(())
            })?;
            let (nominal, disturbed) = last.expect("training always ends with a snapshot");
            let n_experts = nominal.expert_usage.len().max(1);
            let usage: Vec<usize> = nominal
                .expert_usage
                .iter()
                .zip(disturbed.expert_usage.iter().chain(std::iter::repeat(&0)))
                .map(|(a, b)| a + b)
                .collect();
            let gated = (nominal.control_steps + disturbed.control_steps).max(1) as f64;
            let entropy = nominal.mean_gate_entropy.unwrap_or(0.0) * nominal.control_steps as f64
                + disturbed.mean_gate_entropy.unwrap_or(0.0) * disturbed.control_steps as f64;
            let purity = if nominal.expert_usage.is_empty() {
                0.0
            } else {
                ExpertStageMap::from_records(&nominal.episodes, n_experts, task)?.purity
            };
            rows.push(AblationRow {
                variant,
                seed,
                steps: outcome.steps,
                train_seconds: started.elapsed().as_secs_f64(),
                nominal_success: best.0,
                disturbed_success: best.1,
                final_nominal_success: nominal.success_rate,
                final_disturbed_success: disturbed.success_rate,
                distinct_experts: usage.iter().filter(|&&c| c > 0).count(),
                mean_gate_entropy: entropy / gated,
                purity,
            });
            models.push(outcome.ema);
        }
    }
    let summary = variants
        .iter()
        .map(|&variant| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let mean = |f: &dyn Fn(&AblationRow) -> f64| {
                rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64
            };
            AblationSummary {
                variant,
                runs: rs.len(),
                nominal_success: mean(&|r| r.nominal_success),
                disturbed_success: mean(&|r| r.disturbed_success),
                mean_distinct_experts: mean(&|r| r.distinct_experts as f64),
                max_distinct_experts: rs.iter().map(|r| r.distinct_experts).max().unwrap_or(0),
                mean_gate_entropy: mean(&|r| r.mean_gate_entropy),
                mean_purity: mean(&|r| r.purity),
            }
        })
        .collect();
    Ok(AblationTable {
        rows,
        summary,
        models,
    })
}
