//! Deterministic toy 2-D pick-and-place world.
//!
//! A point gripper moves in the unit square, closes on objects within the
//! grasp radius and carries them to their zones. Each object has its own
//! zone; the task succeeds once every object rests inside its zone. The
//! module also provides the scripted demonstrator, ground-truth stage labels
//! and the grasp-reset disturbance.

mod expert;
mod stage;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub use expert::{rollout_expert, scripted_expert, ExpertTrace, PLACE_TOLERANCE};
pub use stage::{stage_of, stage_toward, StageKind, StageLabel, STAGE_NEAR_RADIUS};

/// Maximum gripper displacement per tick along each axis.
pub const MAX_STEP: f64 = 0.05;
/// Gripper position after `reset`.
pub const HOME: [f64; 2] = [0.5, 0.1];
/// `[dx, dy, grip]`.
pub const ACTION_DIM: usize = 3;

const SPAWN_X: (f64, f64) = (0.1, 0.9);
const OBJECT_SPAWN_Y: (f64, f64) = (0.3, 0.5);
const ZONE_SPAWN_Y: (f64, f64) = (0.7, 0.9);
const MAX_REJECTIONS: usize = 1000;

pub type Vec2 = [f64; 2];
pub type Action = [f64; ACTION_DIM];

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task_id: String,
    pub num_objects: usize,
    /// Object indices in demonstration order.
    pub subtask_order: Vec<usize>,
    pub grasp_radius: f64,
    pub max_steps: usize,
    pub success_radius: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::with_objects(2)
    }
}

impl TaskSpec {
    pub fn with_objects(num_objects: usize) -> Self {
        Self {
            task_id: format!("blocks{num_objects}"),
            num_objects,
            subtask_order: (0..num_objects).collect(),
            grasp_radius: 0.06,
            max_steps: 300,
            success_radius: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_objects) {
            return Err(Error::Config(format!(
                "num_objects must be 2 or 3, got {}",
                self.num_objects
            )));
        }
        let mut sorted = self.subtask_order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.num_objects).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "subtask_order {:?} is not a permutation of 0..{}",
                self.subtask_order, self.num_objects
            )));
        }
        if self.max_steps < 50 {
            return Err(Error::Config(format!(
                "max_steps must be at least 50, got {}",
                self.max_steps
            )));
        }
        if !(self.grasp_radius > 0.0 && self.success_radius > 0.0) {
            return Err(Error::Config("radii must be positive".into()));
        }
        Ok(())
    }

    /// Length of the observation vector for this task.
    pub fn obs_dim(&self) -> usize {
        observation_dim(self.num_objects)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSpec {
    pub enabled: bool,
    pub target_object: usize,
    /// Distance the grasped object must travel from its grasp point before
    /// it is reset.
    pub trigger_displacement: f64,
    pub max_triggers: usize,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            target_object: 0,
            trigger_displacement: 0.1,
            max_triggers: 1,
        }
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Reset of the first object in demonstration order.
    pub fn grasp_reset(task: &TaskSpec) -> Self {
        Self {
            enabled: true,
            target_object: task.subtask_order[0],
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub gripper_pos: Vec2,
    pub gripper_closed: bool,
    pub held_object: Option<usize>,
    pub object_pos: Vec<Vec2>,
    pub object_initial_pos: Vec<Vec2>,
    pub zone_centers: Vec<Vec2>,
    pub step_index: usize,
    pub done: bool,
    pub success: bool,
    /// Where the held object was picked up.
    pub grasp_point: Option<Vec2>,
    pub disturbances_fired: usize,
}

impl SimState {
    pub fn num_objects(&self) -> usize {
        self.object_pos.len()
    }

    /// Object rests (detached) inside its own zone.
    pub fn is_placed(&self, object: usize, task: &TaskSpec) -> bool {
        self.held_object != Some(object)
            && distance(self.object_pos[object], self.zone_centers[object]) <= task.success_radius
    }

    pub fn all_placed(&self, task: &TaskSpec) -> bool {
        (0..self.num_objects()).all(|i| self.is_placed(i, task))
    }

    /// Resets the held object to its initial position and detaches it,
    /// leaving the gripper open. Returns whether anything was reset.
    pub fn force_disturbance(&mut self) -> bool {
        let Some(obj) = self.held_object.take() else {
            return false;
        };
        self.object_pos[obj] = self.object_initial_pos[obj];
        self.gripper_closed = false;
        self.grasp_point = None;
        self.disturbances_fired += 1;
        true
    }
}

/// Samples a fresh episode. Positions are drawn uniformly from disjoint
/// object and zone strips and rejected until every pair of them is at least
/// `2·max(grasp_radius, success_radius)` apart.
pub fn reset(task: &TaskSpec, seed: u64) -> Result<SimState> {
    task.validate()?;
    let n = task.num_objects;
    let min_sep = 2.0 * task.grasp_radius.max(task.success_radius);
    let mut rng = seeding::rng(seed);
    let mut sample = |y: (f64, f64)| -> Vec2 {
        [
            rng.random_range(SPAWN_X.0..SPAWN_X.1),
            rng.random_range(y.0..y.1),
        ]
    };
    for _ in 0..MAX_REJECTIONS {
        let objects: Vec<Vec2> = (0..n).map(|_| sample(OBJECT_SPAWN_Y)).collect();
        let zones: Vec<Vec2> = (0..n).map(|_| sample(ZONE_SPAWN_Y)).collect();
        let all: Vec<Vec2> = objects.iter().chain(&zones).copied().collect();
        let separated = all
            .iter()
            .enumerate()
            .all(|(i, a)| all[i + 1..].iter().all(|b| distance(*a, *b) >= min_sep));
        if separated {
            return Ok(SimState {
                gripper_pos: HOME,
                gripper_closed: false,
                held_object: None,
                object_initial_pos: objects.clone(),
                object_pos: objects,
                zone_centers: zones,
                step_index: 0,
                done: false,
                success: false,
                grasp_point: None,
                disturbances_fired: 0,
            });
        }
    }
    Err(Error::Config(format!(
        "could not place {n} objects and zones {min_sep:.3} apart after {MAX_REJECTIONS} samples"
    )))
}

/// Advances the world by one tick.
pub fn step(
    state: &SimState,
    action: Action,
    task: &TaskSpec,
    disturbance: &DisturbanceSpec,
) -> Result<(SimState, StageLabel)> {
    if let Some(bad) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(Error::Contract(format!(
            "action component {bad} outside [-1, 1]"
        )));
    }
    if state.done {
        return Err(Error::State("step called on a finished episode".into()));
    }
    let mut s = state.clone();
    s.gripper_pos = clamp_unit([
        s.gripper_pos[0] + MAX_STEP * action[0],
        s.gripper_pos[1] + MAX_STEP * action[1],
    ]);

    let want_closed = action[2] > 0.0;
    if want_closed && !s.gripper_closed {
        s.gripper_closed = true;
        if s.held_object.is_none() {
            let candidate = (0..s.num_objects())
                .map(|i| (i, distance(s.gripper_pos, s.object_pos[i])))
                .filter(|&(_, d)| d <= task.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((obj, _)) = candidate {
                s.held_object = Some(obj);
                s.grasp_point = Some(s.object_pos[obj]);
            }
        }
    } else if !want_closed && s.gripper_closed {
        s.gripper_closed = false;
        s.held_object = None;
        s.grasp_point = None;
    }
    if let Some(obj) = s.held_object {
        s.object_pos[obj] = s.gripper_pos;
    }

    if disturbance.enabled
        && s.held_object == Some(disturbance.target_object)
        && s.disturbances_fired < disturbance.max_triggers
    {
        let obj = disturbance.target_object;
        let carried = s
            .grasp_point
            .map_or(0.0, |g| distance(g, s.object_pos[obj]));
        if carried >= disturbance.trigger_displacement {
            s.force_disturbance();
        }
    }

    s.step_index += 1;
    s.success = s.all_placed(task);
    s.done = s.success || s.step_index >= task.max_steps;
    let label = stage_of(&s, task);
    Ok((s, label))
}

pub fn observation_dim(num_objects: usize) -> usize {
    2 + 1 + (num_objects + 1) + 2 * num_objects + 2 * num_objects
}

/// Fixed-layout observation: gripper position (2), gripper closed (1), held
/// one-hot with slot 0 meaning "nothing" (n+1), object positions (2n), zone
/// centres (2n).
pub fn observe(state: &SimState) -> Vec<f64> {
    let n = state.num_objects();
    let mut obs = Vec::with_capacity(observation_dim(n));
    obs.extend_from_slice(&state.gripper_pos);
    obs.push(if state.gripper_closed { 1.0 } else { 0.0 });
    let held_slot = state.held_object.map_or(0, |i| i + 1);
    obs.extend((0..=n).map(|k| if k == held_slot { 1.0 } else { 0.0 }));
    obs.extend(state.object_pos.iter().flatten());
    obs.extend(state.zone_centers.iter().flatten());
    obs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec::default()
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let a = reset(&task(), 17).unwrap();
        let b = reset(&task(), 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, reset(&task(), 18).unwrap());
    }

    #[test]
    fn reset_separates_objects_and_zones() {
        let t = task();
        for seed in 0..100 {
            let s = reset(&t, seed).unwrap();
            let all: Vec<Vec2> = s
                .object_pos
                .iter()
                .chain(&s.zone_centers)
                .copied()
                .collect();
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    assert!(distance(all[i], all[j]) >= 2.0 * t.grasp_radius);
                }
            }
        }
    }

    #[test]
    fn two_object_reset_shape() {
        let s = reset(&task(), 0).unwrap();
        assert_eq!(s.object_pos.len(), 2);
        assert_eq!(s.held_object, None);
        assert_eq!(s.gripper_pos, HOME);
    }

    #[test]
    fn unsatisfiable_spawn_is_a_configuration_error() {
        let t = TaskSpec {
            grasp_radius: 0.5,
            ..task()
        };
        assert!(matches!(reset(&t, 0), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_task_specs_rejected() {
        let mut t = task();
        t.subtask_order = vec![0, 0];
        assert!(t.validate().is_err());
        let mut t = task();
        t.max_steps = 10;
        assert!(t.validate().is_err());
        assert!(TaskSpec::with_objects(4).validate().is_err());
        assert!(TaskSpec::with_objects(3).validate().is_ok());
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        let t = task();
        let s0 = reset(&t, 3).unwrap();
        let (s1, _) = step(&s0, [0.0, 0.0, 0.0], &t, &DisturbanceSpec::none()).unwrap();
        let mut expected = s0.clone();
        expected.step_index = 1;
        assert_eq!(s1, expected);
    }

    #[test]
    fn closing_next_to_an_object_grasps_it() {
        let t = task();
        let mut s = reset(&t, 4).unwrap();
        s.gripper_pos = [s.object_pos[0][0] + 0.03, s.object_pos[0][1]];
        let (s1, label) = step(&s, [0.0, 0.0, 1.0], &t, &DisturbanceSpec::none()).unwrap();
        assert_eq!(s1.held_object, Some(0));
        assert!(s1.gripper_closed);
        assert_eq!(distance(s1.gripper_pos, s1.object_pos[0]), 0.0);
        assert_eq!(label, StageLabel::Transport(0));
    }

    #[test]
    fn out_of_range_action_and_step_after_done() {
        let t = task();
        let s = reset(&t, 5).unwrap();
        assert!(matches!(
            step(&s, [1.5, 0.0, 0.0], &t, &DisturbanceSpec::none()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            step(&s, [f64::NAN, 0.0, 0.0], &t, &DisturbanceSpec::none()),
            Err(Error::Contract(_))
        ));
        let mut done = s.clone();
        done.done = true;
        assert!(matches!(
            step(&done, [0.0; 3], &t, &DisturbanceSpec::none()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn gripper_is_clamped_to_the_unit_square() {
        let t = task();
        let mut s = reset(&t, 6).unwrap();
        s.gripper_pos = [0.99, 0.01];
        let (s1, _) = step(&s, [1.0, -1.0, 0.0], &t, &DisturbanceSpec::none()).unwrap();
        assert_eq!(s1.gripper_pos, [1.0, 0.0]);
    }

    #[test]
    fn observation_layout() {
        let s = reset(&task(), 7).unwrap();
        let obs = observe(&s);
        assert_eq!(obs.len(), 2 + 1 + 3 + 4 + 4);
        assert_eq!(obs, observe(&s.clone()));
        assert_eq!(&obs[3..6], &[1.0, 0.0, 0.0]);

        let mut moved = s.clone();
        moved.object_pos[1][0] += 0.01;
        moved.object_pos[1][1] -= 0.01;
        let changed: Vec<usize> = observe(&moved)
            .iter()
            .zip(&obs)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changed, vec![8, 9]);
    }

    #[test]
    fn forced_disturbance_restores_initial_position() {
        let t = task();
        let mut s = reset(&t, 8).unwrap();
        assert!(!s.force_disturbance());
        s.gripper_pos = s.object_pos[1];
        let (mut s, _) = step(&s, [0.0, 0.0, 1.0], &t, &DisturbanceSpec::none()).unwrap();
        let (s2, _) = step(&s, [1.0, 1.0, 1.0], &t, &DisturbanceSpec::none()).unwrap();
        s = s2;
        assert_ne!(s.object_pos[1], s.object_initial_pos[1]);
        assert!(s.force_disturbance());
        assert_eq!(s.object_pos[1], s.object_initial_pos[1]);
        assert_eq!(s.held_object, None);
    }
}
