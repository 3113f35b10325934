//! Rule-based high-level planner: turns an ordered list of sub-tasks into a
//! schedule directive using the calibrated expert map. Progress is read
//! from the simulator's ground truth.

use crate::blockworld::{SimState, TaskSpec};
use crate::error::{Error, Result};

use super::{Completion, ExpertStageMap, OverrideDirective, ScheduleEntry};

/// `"A"`, `"B"`, ... or a plain object index.
pub fn parse_subtask(name: &str, task: &TaskSpec) -> Result<usize> {
    let trimmed = name.trim();
    let idx = match trimmed.as_bytes() {
        [c @ b'A'..=b'Z'] => Some((c - b'A') as usize),
        [c @ b'a'..=b'z'] => Some((c - b'a') as usize),
        _ => trimmed.parse().ok(),
    };
    match idx {
        Some(i) if i < task.num_objects => Ok(i),
        _ => Err(Error::Planning(format!(
            "unknown sub-task {name:?} for a {}-object task",
            task.num_objects
        ))),
    }
}

pub fn subtask_name(object: usize) -> String {
    char::from(b'A' + object as u8).to_string()
}

/// One schedule entry per goal sub-task not yet completed in `state`, each
/// forcing the calibrated expert of its current stage until the object is
/// placed. An empty goal yields the no-override directive.
pub fn plan_stub(
    goal: &[usize],
    map: &ExpertStageMap,
    state: Option<&SimState>,
    task: &TaskSpec,
) -> Result<OverrideDirective> {
    if goal.is_empty() {
        return Ok(OverrideDirective::none());
    }
    let mut entries = Vec::with_capacity(goal.len());
    for &object in goal {
        if object >= task.num_objects {
            return Err(Error::Planning(format!(
                "goal names object {object} of a {}-object task",
                task.num_objects
            )));
        }
        let experts = map.subtask_experts(object).map_err(|e| {
            Error::Planning(format!(
                "sub-task {} is not calibrated: {e}",
                subtask_name(object)
            ))
        })?;
        let until = Completion::ObjectPlaced(object);
        if state.is_some_and(|s| until.holds(s, task)) {
            continue;
        }
        entries.push(ScheduleEntry {
            subtask: object,
            experts,
            until,
        });
    }
    Ok(OverrideDirective::schedule(entries))
}
