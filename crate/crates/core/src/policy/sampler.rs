//! Receding-horizon execution: observation history and action-chunk buffer.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::PolicyNets;
use crate::error::Result;
use crate::moe::GateDecision;
use crate::seeding;

/// One sampled chunk in environment units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledChunk {
    /// `T_a` actions, oldest first.
    pub actions: Vec<Vec<f64>>,
    /// Router decision that conditioned the chunk (absent without a MoE).
    pub gate: Option<GateDecision>,
}

/// The last `T_o` observations; the first observation of an episode fills
/// every slot.
#[derive(Clone, Debug)]
pub struct ObsHistory {
    horizon: usize,
    buf: VecDeque<Vec<f64>>,
}

impl ObsHistory {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            buf: VecDeque::with_capacity(horizon),
        }
    }

    pub fn push(&mut self, obs: Vec<f64>) {
        if self.buf.is_empty() {
            self.buf.extend(std::iter::repeat_n(obs, self.horizon));
        } else {
            self.buf.pop_front();
            self.buf.push_back(obs);
        }
    }

    pub fn window(&self) -> Vec<Vec<f64>> {
        self.buf.iter().cloned().collect()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Actions of the current chunk that are still to be executed.
#[derive(Clone, Debug, Default)]
pub struct ChunkBuffer {
    pending: VecDeque<Vec<f64>>,
    pub chunks_sampled: usize,
    pub current_gate: Option<GateDecision>,
}

impl ChunkBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn needs_sample(&self) -> bool {
        self.pending.is_empty()
    }

    /// Queues the first `execute_horizon` actions of `chunk`.
    pub fn load(&mut self, chunk: SampledChunk, execute_horizon: usize) {
        self.pending = chunk.actions.into_iter().take(execute_horizon).collect();
        self.current_gate = chunk.gate;
        self.chunks_sampled += 1;
    }

    pub fn next_action(&mut self) -> Option<Vec<f64>> {
        self.pending.pop_front()
    }

    /// Drops the remaining actions so the next call re-plans.
    pub fn clear(&mut self) {
        self.pending.clear();
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

/// Next action of a single rollout, sampling a new chunk when the buffer is
/// exhausted. Chunk `c` of a rollout uses seed `derive(seed, c)`.
pub fn act(
    nets: &PolicyNets,
    history: &ObsHistory,
    buffer: &mut ChunkBuffer,
    seed: u64,
    forced: Option<usize>,
) -> Result<Vec<f64>> {
    if buffer.needs_sample() {
        let chunk_seed = seeding::derive(seed, buffer.chunks_sampled as u64);
        let chunk = nets.sample_action_chunk(&history.window(), chunk_seed, forced)?;
        buffer.load(chunk, nets.config.chunking.execute_horizon);
    }
    Ok(buffer
        .next_action()
        .expect("freshly loaded chunk is non-empty"))
}
