//! Closed-loop evaluation of controllers in the block world.
//!
//! Rollouts advance in lockstep groups so a policy can sample the chunks of
//! a whole group in one batched denoising pass. Groups run on a rayon pool
//! whose size comes from `MODP_THREADS` (default: all cores). Every rollout
//! draws from its own seeds, so results do not depend on grouping or
//! thread count.

use serde::{Deserialize, Serialize};

use crate::blockworld::{
    observe, reset, scripted_expert, stage_of, step, Action, DisturbanceSpec, SimState, TaskSpec,
    ACTION_DIM,
};
use crate::error::{Error, Result};
use crate::moe::GateDecision;
use crate::policy::{ChunkBuffer, ObsHistory, PolicyNets};
use crate::seeding;

const ENV_STREAM: u64 = 0x656e76;
const CONTROL_STREAM: u64 = 0x63746c;
const GROUP_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Nominal,
    Disturbed,
}

impl Condition {
    pub fn disturbance(self, task: &TaskSpec) -> DisturbanceSpec {
        match self {
            Self::Nominal => DisturbanceSpec::none(),
            Self::Disturbed => DisturbanceSpec::grasp_reset(task),
        }
    }
}

/// A controller's output for one control step.
#[derive(Clone, Debug)]
pub struct StepChoice {
    pub action: Action,
    pub gate: Option<GateDecision>,
}

/// Anything that can drive rollouts: a trained policy or the scripted
/// expert.
pub trait Controller: Sync {
    /// Per-rollout state carried between steps.
    type Memory: Send;

    fn check_task(&self, task: &TaskSpec) -> Result<()>;

    fn start(&self, rollout: usize, seed: u64) -> Self::Memory;

    /// Actions for a group of live rollouts.
    fn act(
        &self,
        task: &TaskSpec,
        states: &[&SimState],
        memories: &mut [&mut Self::Memory],
    ) -> Result<Vec<StepChoice>>;

    /// Whether an override schedule ran out before the episode ended.
    fn fell_back(&self, _memory: &Self::Memory) -> bool {
        false
    }
}

/// The scripted demonstrator wrapped as a controller.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExpertController {
    pub noise: f64,
}

impl Controller for ExpertController {
    type Memory = u64;

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        task.validate()
    }

    fn start(&self, _rollout: usize, seed: u64) -> u64 {
        seed
    }

    fn act(
        &self,
        task: &TaskSpec,
        states: &[&SimState],
        memories: &mut [&mut u64],
    ) -> Result<Vec<StepChoice>> {
        Ok(states
            .iter()
            .zip(memories.iter())
            .map(|(s, &&mut seed)| StepChoice {
                action: scripted_expert(
                    s,
                    task,
                    self.noise,
                    seeding::derive(seed, s.step_index as u64),
                ),
                gate: None,
            })
            .collect())
    }
}

/// Supplies a forced expert at each chunk re-sampling boundary.
pub trait OverrideSource: Send {
    fn forced(&mut self, state: &SimState, task: &TaskSpec) -> Option<usize>;

    fn fell_back(&self) -> bool {
        false
    }
}

type OverrideFactory<'a> = dyn Fn(usize) -> Box<dyn OverrideSource> + Sync + 'a;

/// Receding-horizon execution of trained networks.
pub struct PolicyController<'a> {
    pub nets: &'a PolicyNets,
    overrides: Option<&'a OverrideFactory<'a>>,
}

pub struct PolicyMemory {
    history: ObsHistory,
    buffer: ChunkBuffer,
    seed: u64,
    source: Option<Box<dyn OverrideSource>>,
}

impl<'a> PolicyController<'a> {
    pub fn new(nets: &'a PolicyNets) -> Self {
        Self {
            nets,
            overrides: None,
        }
    }

    /// Each rollout gets its own override source from `factory`.
    pub fn with_overrides(nets: &'a PolicyNets, factory: &'a OverrideFactory<'a>) -> Self {
        Self {
            nets,
            overrides: Some(factory),
        }
    }
}

impl Controller for PolicyController<'_> {
    type Memory = PolicyMemory;

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        task.validate()?;
        let c = &self.nets.config;
        if c.obs_dim != task.obs_dim() || c.act_dim != ACTION_DIM {
            return Err(Error::Contract(format!(
                "checkpoint expects obs_dim {} / act_dim {}, task {:?} provides {} / {}",
                c.obs_dim,
                c.act_dim,
                task.task_id,
                task.obs_dim(),
                ACTION_DIM
            )));
        }
        Ok(())
    }

    fn start(&self, rollout: usize, seed: u64) -> PolicyMemory {
        PolicyMemory {
            history: ObsHistory::new(self.nets.config.chunking.obs_horizon),
            buffer: ChunkBuffer::new(),
            seed,
            source: self.overrides.map(|f| f(rollout)),
        }
    }

    fn act(
        &self,
        task: &TaskSpec,
        states: &[&SimState],
        memories: &mut [&mut PolicyMemory],
    ) -> Result<Vec<StepChoice>> {
        let mut want = Vec::new();
        let mut histories = Vec::new();
        let mut seeds = Vec::new();
        let mut forced = Vec::new();
        for (i, (s, m)) in states.iter().zip(memories.iter_mut()).enumerate() {
            m.history.push(observe(s));
            if m.buffer.needs_sample() {
                want.push(i);
                histories.push(m.history.window());
                seeds.push(seeding::derive(m.seed, m.buffer.chunks_sampled as u64));
                forced.push(m.source.as_mut().and_then(|src| src.forced(s, task)));
            }
        }
        if !want.is_empty() {
            let any_forced = forced.iter().any(Option::is_some);
            let chunks = self.nets.sample_action_chunks(
                &histories,
                &seeds,
                any_forced.then_some(forced.as_slice()),
            )?;
            let exec = self.nets.config.chunking.execute_horizon;
            for (i, chunk) in want.into_iter().zip(chunks) {
                memories[i].buffer.load(chunk, exec);
            }
        }
        memories
            .iter_mut()
            .map(|m| {
                let a = m
                    .buffer
                    .next_action()
                    .ok_or_else(|| Error::State("empty action chunk".into()))?;
                let mut action = [0.0; ACTION_DIM];
                for (dst, v) in action.iter_mut().zip(a) {
                    *dst = v.clamp(-1.0, 1.0);
                }
                Ok(StepChoice {
                    action,
                    gate: m.buffer.current_gate.clone(),
                })
            })
            .collect()
    }

    fn fell_back(&self, memory: &PolicyMemory) -> bool {
        memory.source.as_ref().is_some_and(|s| s.fell_back())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub t: usize,
    /// Ground-truth stage code before the action.
    pub stage: u8,
    pub gate: Option<GateDecision>,
}

impl StepTelemetry {
    /// Expert that actually conditioned the step: the forced one under an
    /// override, otherwise the router's argmax.
    pub fn expert(&self) -> Option<usize> {
        self.gate.as_ref().and_then(|g| g.selected.first().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub seed: u64,
    pub rollout: usize,
    pub env_seed: u64,
    pub success: bool,
    pub length: usize,
    pub disturbances_fired: usize,
    /// Objects in the order they first reached their zones.
    pub placed_order: Vec<usize>,
    pub override_fallback: bool,
    pub telemetry: Vec<StepTelemetry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub task_id: String,
    pub per_seed: Vec<SeedResult>,
    pub rollouts: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub control_steps: usize,
    /// Mean router entropy over gated control steps.
    pub mean_gate_entropy: Option<f64>,
    /// Control steps per executed expert.
    pub expert_usage: Vec<usize>,
    pub distinct_experts: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub episodes: Vec<RolloutRecord>,
}

/// Runs `num_rollouts` episodes per seed. Rollout `i` of seed `s` resets
/// the world with `derive_path(s, [ENV, i])` and seeds the controller with
/// `derive_path(s, [CONTROL, i])`.
pub fn evaluate<C: Controller>(
    controller: &C,
    task: &TaskSpec,
    condition: Condition,
    num_rollouts: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    controller.check_task(task)?;
    let disturbance = condition.disturbance(task);
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..num_rollouts).map(move |i| (s, i)))
        .collect();
    let groups: Vec<&[(u64, usize)]> = jobs.chunks(GROUP_SIZE).collect();
    let run = || -> Result<Vec<Vec<RolloutRecord>>> {
        use rayon::prelude::*;
        groups
            .par_iter()
            .map(|g| run_group(controller, task, &disturbance, g))
            .collect()
    };
    let records: Vec<RolloutRecord> = match pool() {
        Some(p) => p.install(run)?,
        None => run()?,
    }
    .into_iter()
    .flatten()
    .collect();
    Ok(summarize(condition, task, seeds, records))
}

fn pool() -> Option<rayon::ThreadPool> {
    let threads = std::env::var("MODP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .ok()
}

fn run_group<C: Controller>(
    controller: &C,
    task: &TaskSpec,
    disturbance: &DisturbanceSpec,
    jobs: &[(u64, usize)],
) -> Result<Vec<RolloutRecord>> {
    let mut states = Vec::with_capacity(jobs.len());
    let mut memories = Vec::with_capacity(jobs.len());
    let mut records = Vec::with_capacity(jobs.len());
    for &(seed, i) in jobs {
        let env_seed = seeding::derive_path(seed, &[ENV_STREAM, i as u64]);
        states.push(reset(task, env_seed)?);
        memories.push(controller.start(i, seeding::derive_path(seed, &[CONTROL_STREAM, i as u64])));
        records.push(RolloutRecord {
            seed,
            rollout: i,
            env_seed,
            success: false,
            length: 0,
            disturbances_fired: 0,
            placed_order: Vec::new(),
            override_fallback: false,
            telemetry: Vec::new(),
        });
    }
    loop {
        let live: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if live.is_empty() {
            break;
        }
        let choices = {
            let live_states: Vec<&SimState> = live.iter().map(|&i| &states[i]).collect();
            let mut live_mem: Vec<&mut C::Memory> = memories
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| !states[*i].done)
                .map(|(_, m)| m)
                .collect();
            controller.act(task, &live_states, &mut live_mem)?
        };
        for (&i, choice) in live.iter().zip(choices) {
            let state = &states[i];
            records[i].telemetry.push(StepTelemetry {
                t: state.step_index,
                stage: stage_of(state, task).code(),
                gate: choice.gate,
            });
            let (next, _) = step(state, choice.action, task, disturbance)?;
            for obj in 0..task.num_objects {
                if next.is_placed(obj, task) && !records[i].placed_order.contains(&obj) {
                    records[i].placed_order.push(obj);
                }
            }
            states[i] = next;
        }
    }
    for ((rec, state), mem) in records.iter_mut().zip(&states).zip(&memories) {
        rec.success = state.success;
        rec.length = state.step_index;
        rec.disturbances_fired = state.disturbances_fired;
        rec.override_fallback = controller.fell_back(mem);
    }
    Ok(records)
}

fn summarize(
    condition: Condition,
    task: &TaskSpec,
    seeds: &[u64],
    episodes: Vec<RolloutRecord>,
) -> EvalReport {
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let runs: Vec<&RolloutRecord> = episodes.iter().filter(|r| r.seed == seed).collect();
            let successes = runs.iter().filter(|r| r.success).count();
            SeedResult {
                seed,
                rollouts: runs.len(),
                successes,
                success_rate: ratio(successes, runs.len()),
            }
        })
        .collect();
    let successes = episodes.iter().filter(|r| r.success).count();
    let control_steps: usize = episodes.iter().map(|r| r.telemetry.len()).sum();
    let mut usage: Vec<usize> = Vec::new();
    let mut entropy_sum = 0.0;
    let mut gated = 0;
    for s in episodes.iter().flat_map(|r| &r.telemetry) {
        if let Some(g) = &s.gate {
            if usage.is_empty() {
                usage = vec![0; g.probabilities.len()];
            }
            entropy_sum += g.entropy();
            gated += 1;
        }
        if let Some(e) = s.expert() {
            usage[e] += 1;
        }
    }
    EvalReport {
        condition,
        task_id: task.task_id.clone(),
        per_seed,
        rollouts: episodes.len(),
        successes,
        success_rate: ratio(successes, episodes.len()),
        mean_episode_length: if episodes.is_empty() {
            0.0
        } else {
            episodes.iter().map(|r| r.length as f64).sum::<f64>() / episodes.len() as f64
        },
        control_steps,
        mean_gate_entropy: (gated > 0).then(|| entropy_sum / gated as f64),
        distinct_experts: usage.iter().filter(|&&c| c > 0).count(),
        expert_usage: usage,
        episodes,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
