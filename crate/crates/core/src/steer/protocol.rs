//! WebSocket wire frames: one JSON object per text frame.

use serde::{Deserialize, Serialize};

use crate::blockworld::{stage_of, SimState, TaskSpec};
use crate::error::{Error, Result};
use crate::moe::GateDecision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateFrame {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub overridden: bool,
}

impl From<&GateDecision> for GateFrame {
    fn from(g: &GateDecision) -> Self {
        Self {
            probs: g.probabilities.clone(),
            selected: g.selected.clone(),
            weights: g.combine_weights.clone(),
            overridden: g.overridden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

impl Outcome {
    pub fn of(state: &SimState) -> Self {
        match (state.done, state.success) {
            (false, _) => Outcome::Running,
            (true, true) => Outcome::Success,
            (true, false) => Outcome::Failure,
        }
    }
}

/// Published after every control step and whenever a command changes the
/// session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFrame {
    pub t: usize,
    pub gripper: [f64; 2],
    pub closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<[f64; 2]>,
    pub zones: Vec<[f64; 2]>,
    pub stage: String,
    /// Absent until the first chunk has been sampled.
    pub gate: Option<GateFrame>,
    pub paused: bool,
    pub outcome: Outcome,
}

impl StateFrame {
    pub fn new(
        state: &SimState,
        task: &TaskSpec,
        gate: Option<&GateDecision>,
        paused: bool,
    ) -> Self {
        Self {
            t: state.step_index,
            gripper: state.gripper_pos,
            closed: state.gripper_closed,
            held: state.held_object,
            objects: state.object_pos.clone(),
            zones: state.zone_centers.clone(),
            stage: stage_of(state, task).to_string(),
            gate: gate.map(GateFrame::from),
            paused,
            outcome: Outcome::of(state),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerFrame {
    State(StateFrame),
    Error { msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireMode {
    None,
    Force,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Command {
    Override {
        mode: WireMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expert: Option<usize>,
    },
    Schedule {
        subtasks: Vec<String>,
    },
    Pause {},
    Resume {},
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Disturb {},
}

impl Command {
    pub fn parse(text: &str) -> Result<Self> {
        let cmd: Command = serde_json::from_str(text)
            .map_err(|e| Error::Contract(format!("malformed command: {e}")))?;
        if let Command::Override { mode, expert } = &cmd {
            match (mode, expert) {
                (WireMode::Force, None) => {
                    return Err(Error::Contract("force override needs an expert".into()))
                }
                (WireMode::None, Some(_)) => {
                    return Err(Error::Contract("mode none takes no expert".into()))
                }
                _ => {}
            }
        }
        Ok(cmd)
    }
}

impl ServerFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialise")
    }
}
