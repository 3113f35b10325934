//! Expert/stage co-occurrence counts and the stage-purity score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blockworld::{StageKind, StageLabel, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::PolicyNets;
use crate::trainer::{evaluate, Condition, EvalReport, PolicyController, RolloutRecord};

/// Stages seen fewer times than this get no preferred expert.
pub const MIN_STAGE_COUNT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStageMap {
    pub num_experts: usize,
    /// Stage code to per-expert step counts.
    pub counts: BTreeMap<u8, Vec<usize>>,
    /// Most frequent expert of every stage seen at least
    /// [`MIN_STAGE_COUNT`] times.
    pub stage_to_expert: BTreeMap<u8, usize>,
    /// `Σ_s max_i c(s,i) / Σ_{s,i} c(s,i)`.
    pub purity: f64,
    /// Expected stages with no observations at all.
    pub unobserved: Vec<u8>,
    /// Stages observed, but too rarely to map.
    pub sparse: Vec<u8>,
}

impl ExpertStageMap {
    /// Tallies `(stage code, expert)` pairs. `expected` lists the stages a
    /// complete calibration should cover.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (u8, usize)>,
        num_experts: usize,
        expected: &[StageLabel],
    ) -> Result<Self> {
        let mut counts: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (stage, expert) in pairs {
            if expert >= num_experts {
                return Err(Error::Contract(format!(
                    "expert {expert} outside [0, {num_experts})"
                )));
            }
            counts.entry(stage).or_insert_with(|| vec![0; num_experts])[expert] += 1;
        }
        let total: usize = counts.values().flatten().sum();
        if total == 0 {
            return Err(Error::Contract(
                "calibration needs at least one gated control step".into(),
            ));
        }
        let peak = |row: &[usize]| -> (usize, usize) {
            let mut best = 0;
            for (i, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = i;
                }
            }
            (best, row[best])
        };
        let purity = counts.values().map(|r| peak(r).1).sum::<usize>() as f64 / total as f64;
        let mut stage_to_expert = BTreeMap::new();
        let mut sparse = Vec::new();
        for (&stage, row) in &counts {
            if row.iter().sum::<usize>() >= MIN_STAGE_COUNT {
                stage_to_expert.insert(stage, peak(row).0);
            } else {
                sparse.push(stage);
            }
        }
        let unobserved = expected
            .iter()
            .map(|l| l.code())
            .filter(|c| !counts.contains_key(c))
            .collect();
        Ok(Self {
            num_experts,
            counts,
            stage_to_expert,
            purity,
            unobserved,
            sparse,
        })
    }

    /// Co-occurrences of the ground-truth stage and the executed expert over
    /// every gated step of `records`.
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a RolloutRecord>,
        num_experts: usize,
        task: &TaskSpec,
    ) -> Result<Self> {
        let pairs = records
            .into_iter()
            .flat_map(|r| &r.telemetry)
            .filter_map(|s| s.expert().map(|e| (s.stage, e)));
        Self::from_pairs(pairs, num_experts, &task_stages(task))
    }

    pub fn expert_for(&self, stage: StageLabel) -> Option<usize> {
        self.stage_to_expert.get(&stage.code()).copied()
    }

    /// Calibrated experts for the four stages of moving `object`.
    pub fn subtask_experts(&self, object: usize) -> Result<Vec<(StageKind, usize)>> {
        StageKind::ALL
            .iter()
            .map(|&k| {
                let label = StageLabel::new(k, object);
                self.expert_for(label)
                    .map(|e| (k, e))
                    .ok_or_else(|| Error::Planning(format!("stage {label} is not calibrated")))
            })
            .collect()
    }
}

/// Every non-terminal stage of `task`.
pub fn task_stages(task: &TaskSpec) -> Vec<StageLabel> {
    StageLabel::all(task.num_objects)
        .into_iter()
        .filter(|l| *l != StageLabel::Done)
        .collect()
}

/// Runs nominal rollouts of a mixture-of-experts policy and tallies which
/// expert is active in each ground-truth stage.
pub fn calibrate(
    nets: &PolicyNets,
    task: &TaskSpec,
    num_rollouts: usize,
    seeds: &[u64],
) -> Result<(ExpertStageMap, EvalReport)> {
    let moe = nets
        .moe()
        .ok_or_else(|| Error::Contract("calibration needs a mixture-of-experts policy".into()))?;
    let report = evaluate(
        &PolicyController::new(nets),
        task,
        Condition::Nominal,
        num_rollouts,
        seeds,
    )?;
    let map = ExpertStageMap::from_records(&report.episodes, moe.config.num_experts, task)?;
    for code in &map.unobserved {
        log::warn!(
            "stage {} never observed during calibration",
            StageLabel::from_code(*code).map_or_else(|| code.to_string(), |l| l.to_string())
        );
    }
    Ok((map, report))
}
