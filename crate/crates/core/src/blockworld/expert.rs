//! Scripted demonstrator: a proportional controller cycling through
//! approach, close, transport and open for each object in order.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    distance, observe, reset, stage_of, step, Action, DisturbanceSpec, SimState, StageLabel,
    TaskSpec, Vec2, MAX_STEP,
};
use crate::error::Result;
use crate::seeding;

/// The expert closes (or opens) once within this distance of the target.
pub const PLACE_TOLERANCE: f64 = 0.02;
const GAIN: f64 = 0.35;
const NOISE_STREAM: u64 = 0x6e6f697365;

fn toward(from: Vec2, to: Vec2) -> [f64; 2] {
    let v = |a: f64, b: f64| (GAIN * (b - a) / MAX_STEP).clamp(-1.0, 1.0);
    [v(from[0], to[0]), v(from[1], to[1])]
}

/// Expert action for `state`. `seed` drives the Gaussian noise added to the
/// motion components; the grip command is never perturbed.
pub fn scripted_expert(state: &SimState, task: &TaskSpec, noise_scale: f64, seed: u64) -> Action {
    let (motion, grip) = if let Some(j) = state.held_object {
        let zone = state.zone_centers[j];
        if distance(state.object_pos[j], zone) <= PLACE_TOLERANCE {
            ([0.0, 0.0], -1.0)
        } else {
            (toward(state.gripper_pos, zone), 1.0)
        }
    } else {
        match task
            .subtask_order
            .iter()
            .copied()
            .find(|&i| !state.is_placed(i, task))
        {
            Some(i) => {
                let target = state.object_pos[i];
                if !state.gripper_closed && distance(state.gripper_pos, target) <= PLACE_TOLERANCE {
                    ([0.0, 0.0], 1.0)
                } else {
                    (toward(state.gripper_pos, target), -1.0)
                }
            }
            None => ([0.0, 0.0], -1.0),
        }
    };
    let mut action = [motion[0], motion[1], grip];
    if noise_scale > 0.0 {
        let mut rng = seeding::rng(seeding::derive(seed, NOISE_STREAM));
        for a in &mut action[..2] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *a = (*a + noise_scale * z).clamp(-1.0, 1.0);
        }
    }
    action
}

/// One expert episode. `states[t]`, `observations[t]` and `stages[t]`
/// describe the world before `actions[t]` is applied.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertTrace {
    pub states: Vec<SimState>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub stages: Vec<StageLabel>,
    pub final_state: SimState,
    pub success: bool,
}

pub fn rollout_expert(
    task: &TaskSpec,
    seed: u64,
    noise_scale: f64,
    disturbance: &DisturbanceSpec,
) -> Result<ExpertTrace> {
    let mut state = reset(task, seed)?;
    let mut trace = ExpertTrace {
        states: Vec::new(),
        observations: Vec::new(),
        actions: Vec::new(),
        stages: Vec::new(),
        final_state: state.clone(),
        success: false,
    };
    while !state.done {
        let t = state.step_index as u64;
        let action = scripted_expert(&state, task, noise_scale, seeding::derive(seed, t));
        trace.observations.push(observe(&state));
        trace.stages.push(stage_of(&state, task));
        trace.actions.push(action);
        let (next, _) = step(&state, action, task, disturbance)?;
        trace.states.push(std::mem::replace(&mut state, next));
    }
    trace.success = state.success;
    trace.final_state = state;
    Ok(trace)
}
