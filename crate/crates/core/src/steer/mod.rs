//! Inference-time steering: router overrides, sub-task schedules, expert
//! calibration, a rule-based planner, telemetry export and a live
//! WebSocket session.

mod analyze;
mod calibrate;
mod plan;
pub mod protocol;
mod server;

use serde::{Deserialize, Serialize};

use crate::blockworld::{stage_toward, SimState, StageKind, TaskSpec};
use crate::error::{Error, Result};
use crate::moe::GateDecision;
use crate::trainer::OverrideSource;

pub use analyze::{analyze, timeline_csv, Analysis, AnalysisSummary};
pub use calibrate::{calibrate, task_stages, ExpertStageMap, MIN_STAGE_COUNT};
pub use plan::{parse_subtask, plan_stub, subtask_name};
pub use server::{serve, ServerHandle, SessionConfig, SteerSession};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideMode {
    #[default]
    None,
    ForceExpert,
    Schedule,
}

/// Ground-truth condition that ends a schedule entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "object")]
pub enum Completion {
    ObjectPlaced(usize),
}

impl Completion {
    pub fn holds(self, state: &SimState, task: &TaskSpec) -> bool {
        match self {
            Completion::ObjectPlaced(i) => i < state.num_objects() && state.is_placed(i, task),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    /// Object moved by this sub-task.
    pub subtask: usize,
    /// Expert to force in each stage of the sub-task, in stage order.
    pub experts: Vec<(StageKind, usize)>,
    pub until: Completion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverrideDirective {
    pub mode: OverrideMode,
    #[serde(default)]
    pub expert: Option<usize>,
    #[serde(default)]
    pub schedule: Vec<ScheduleEntry>,
}

impl OverrideDirective {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn force(expert: usize) -> Self {
        Self {
            mode: OverrideMode::ForceExpert,
            expert: Some(expert),
            schedule: Vec::new(),
        }
    }

    pub fn schedule(entries: Vec<ScheduleEntry>) -> Self {
        Self {
            mode: OverrideMode::Schedule,
            expert: None,
            schedule: entries,
        }
    }

    pub fn validate(&self, num_experts: usize, num_objects: usize) -> Result<()> {
        let check = |e: usize| {
            if e >= num_experts {
                Err(Error::Contract(format!(
                    "expert {e} outside [0, {num_experts})"
                )))
            } else {
                Ok(())
            }
        };
        match self.mode {
            OverrideMode::None => Ok(()),
            OverrideMode::ForceExpert => match self.expert {
                Some(e) => check(e),
                None => Err(Error::Contract("force_expert without an expert".into())),
            },
            OverrideMode::Schedule => {
                for entry in &self.schedule {
                    if entry.subtask >= num_objects {
                        return Err(Error::Contract(format!(
                            "schedule names sub-task {} of a {num_objects}-object task",
                            entry.subtask
                        )));
                    }
                    if entry.experts.is_empty() {
                        return Err(Error::Contract(format!(
                            "schedule entry for sub-task {} has no experts",
                            entry.subtask
                        )));
                    }
                    for &(_, e) in &entry.experts {
                        check(e)?;
                    }
                }
                Ok(())
            }
        }
    }

    /// Flattened expert sequence of a schedule.
    pub fn expert_sequence(&self) -> Vec<usize> {
        self.schedule
            .iter()
            .flat_map(|e| e.experts.iter().map(|&(_, x)| x))
            .collect()
    }
}

/// Gate decision with the override applied. Probabilities are left
/// untouched; a forced expert gets combine weight 1.0 on its own.
pub fn apply_override(decision: &GateDecision, forced: Option<usize>) -> Result<GateDecision> {
    match forced {
        None => Ok(decision.clone()),
        Some(j) if j < decision.probabilities.len() => Ok(GateDecision {
            probabilities: decision.probabilities.clone(),
            selected: vec![j],
            combine_weights: vec![1.0],
            overridden: true,
        }),
        Some(j) => Err(Error::Contract(format!(
            "expert {j} outside [0, {})",
            decision.probabilities.len()
        ))),
    }
}

/// One forced segment as executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedStep {
    pub entry: usize,
    pub stage: StageKind,
    pub expert: usize,
}

/// Executes a directive against a live episode, one query per chunk
/// re-sampling boundary.
#[derive(Clone, Debug)]
pub struct OverrideRunner {
    directive: OverrideDirective,
    cursor: usize,
    fell_back: bool,
    executed: Vec<ForcedStep>,
}

impl OverrideRunner {
    pub fn new(directive: OverrideDirective) -> Self {
        Self {
            directive,
            cursor: 0,
            fell_back: false,
            executed: Vec::new(),
        }
    }

    pub fn directive(&self) -> &OverrideDirective {
        &self.directive
    }

    /// Index of the active schedule entry.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Forced segments in execution order; consecutive queries that force
    /// the same expert in the same stage are merged.
    pub fn executed(&self) -> &[ForcedStep] {
        &self.executed
    }

    pub fn next_forced(&mut self, state: &SimState, task: &TaskSpec) -> Option<usize> {
        match self.directive.mode {
            OverrideMode::None => None,
            OverrideMode::ForceExpert => self.directive.expert,
            OverrideMode::Schedule => {
                let entries = &self.directive.schedule;
                while self.cursor < entries.len() && entries[self.cursor].until.holds(state, task) {
                    self.cursor += 1;
                }
                let Some(entry) = entries.get(self.cursor) else {
                    if !self.fell_back && !state.all_placed(task) {
                        log::info!("schedule exhausted before the episode ended; router resumes");
                        self.fell_back = true;
                    }
                    return None;
                };
                let stage = stage_toward(state, entry.subtask)
                    .kind()
                    .unwrap_or(StageKind::Approach);
                let expert = entry
                    .experts
                    .iter()
                    .find(|(k, _)| *k == stage)
                    .unwrap_or(&entry.experts[0])
                    .1;
                let step = ForcedStep {
                    entry: self.cursor,
                    stage,
                    expert,
                };
                if self.executed.last() != Some(&step) {
                    self.executed.push(step);
                }
                Some(expert)
            }
        }
    }
}

impl OverrideSource for OverrideRunner {
    fn forced(&mut self, state: &SimState, task: &TaskSpec) -> Option<usize> {
        self.next_forced(state, task)
    }

    fn fell_back(&self) -> bool {
        self.fell_back
    }
}
