//! Ground-truth sub-task stage labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{distance, SimState, TaskSpec};

/// Gripper-to-object (or object-to-zone) distance below which the world is
/// considered to be in the grasp (or release) stage.
pub const STAGE_NEAR_RADIUS: f64 = 0.12;

const DONE_CODE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Approach,
    Grasp,
    Transport,
    Release,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::Approach,
        StageKind::Grasp,
        StageKind::Transport,
        StageKind::Release,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Approach => "approach",
            StageKind::Grasp => "grasp",
            StageKind::Transport => "transport",
            StageKind::Release => "release",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum StageLabel {
    Approach(usize),
    Grasp(usize),
    Transport(usize),
    Release(usize),
    Done,
}

impl StageLabel {
    pub fn new(kind: StageKind, object: usize) -> Self {
        match kind {
            StageKind::Approach => StageLabel::Approach(object),
            StageKind::Grasp => StageLabel::Grasp(object),
            StageKind::Transport => StageLabel::Transport(object),
            StageKind::Release => StageLabel::Release(object),
        }
    }

    pub fn kind(self) -> Option<StageKind> {
        match self {
            StageLabel::Approach(_) => Some(StageKind::Approach),
            StageLabel::Grasp(_) => Some(StageKind::Grasp),
            StageLabel::Transport(_) => Some(StageKind::Transport),
            StageLabel::Release(_) => Some(StageKind::Release),
            StageLabel::Done => None,
        }
    }

    pub fn object(self) -> Option<usize> {
        match self {
            StageLabel::Approach(i)
            | StageLabel::Grasp(i)
            | StageLabel::Transport(i)
            | StageLabel::Release(i) => Some(i),
            StageLabel::Done => None,
        }
    }

    /// Compact storage code: `4·object + kind`, 255 for done.
    pub fn code(self) -> u8 {
        match (self.object(), self.kind()) {
            (Some(i), Some(k)) => (4 * i + k.index()) as u8,
            _ => DONE_CODE,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        if code == DONE_CODE {
            return Some(StageLabel::Done);
        }
        let c = code as usize;
        StageKind::ALL
            .get(c % 4)
            .filter(|_| c / 4 < 63)
            .map(|&k| StageLabel::new(k, c / 4))
    }

    /// Every label of a task with `num_objects` objects, done last.
    pub fn all(num_objects: usize) -> Vec<StageLabel> {
        (0..num_objects)
            .flat_map(|i| StageKind::ALL.iter().map(move |&k| StageLabel::new(k, i)))
            .chain(std::iter::once(StageLabel::Done))
            .collect()
    }

    /// Position in the task's nominal progression.
    pub fn rank(self, task: &TaskSpec) -> usize {
        match (self.object(), self.kind()) {
            (Some(i), Some(k)) => {
                let pos = task
                    .subtask_order
                    .iter()
                    .position(|&o| o == i)
                    .unwrap_or(task.num_objects);
                4 * pos + k.index()
            }
            _ => 4 * task.num_objects + 4,
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.object(), self.kind()) {
            (Some(i), Some(k)) => write!(f, "{}({i})", k.name()),
            _ => f.write_str("done"),
        }
    }
}

impl From<StageLabel> for String {
    fn from(l: StageLabel) -> String {
        l.to_string()
    }
}

impl FromStr for StageLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "done" {
            return Ok(StageLabel::Done);
        }
        let bad = || format!("unrecognised stage label {s:?}");
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let idx: usize = rest
            .strip_suffix(')')
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        let kind = StageKind::ALL
            .iter()
            .find(|k| k.name() == name)
            .ok_or_else(bad)?;
        Ok(StageLabel::new(*kind, idx))
    }
}

impl TryFrom<String> for StageLabel {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// Stage of the world: the held object decides transport/release; otherwise
/// the first unplaced object in demonstration order decides approach/grasp.
pub fn stage_of(state: &SimState, task: &TaskSpec) -> StageLabel {
    if let Some(j) = state.held_object {
        return stage_toward(state, j);
    }
    match task
        .subtask_order
        .iter()
        .copied()
        .find(|&i| !state.is_placed(i, task))
    {
        Some(i) => stage_toward(state, i),
        None => StageLabel::Done,
    }
}

/// Stage of the sub-task that moves `object`, regardless of the order the
/// task prescribes. Placed objects are not checked.
pub fn stage_toward(state: &SimState, object: usize) -> StageLabel {
    if state.held_object == Some(object) {
        let d = distance(state.object_pos[object], state.zone_centers[object]);
        if d <= STAGE_NEAR_RADIUS {
            StageLabel::Release(object)
        } else {
            StageLabel::Transport(object)
        }
    } else if distance(state.gripper_pos, state.object_pos[object]) <= STAGE_NEAR_RADIUS {
        StageLabel::Grasp(object)
    } else {
        StageLabel::Approach(object)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for l in StageLabel::all(3) {
            assert_eq!(StageLabel::from_code(l.code()), Some(l));
            assert_eq!(l.to_string().parse::<StageLabel>().unwrap(), l);
        }
        assert_eq!(StageLabel::Grasp(1).code(), 5);
        assert_eq!(StageLabel::Grasp(1).to_string(), "grasp(1)");
        assert!("lift(0)".parse::<StageLabel>().is_err());
    }

    #[test]
    fn serde_uses_display_names() {
        let j = serde_json::to_string(&StageLabel::Transport(0)).unwrap();
        assert_eq!(j, "\"transport(0)\"");
        let back: StageLabel = serde_json::from_str(&j).unwrap();
        assert_eq!(back, StageLabel::Transport(0));
    }

    #[test]
    fn rank_follows_subtask_order() {
        let mut task = TaskSpec::default();
        task.subtask_order = vec![1, 0];
        assert!(StageLabel::Release(1).rank(&task) < StageLabel::Approach(0).rank(&task));
        assert!(StageLabel::Release(0).rank(&task) < StageLabel::Done.rank(&task));
    }
}
