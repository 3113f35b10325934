//! Demonstration datasets, the composite training loop, checkpoints and
//! evaluation.

mod ablate;
mod checkpoint;
mod dataset;
mod eval;
mod framing;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffkit::{adam_step_store, AdamConfig, AdamState, Ema, Graph};
use crate::error::{Error, Result};
use crate::moe::{auxiliary_loss, batch_stats, MoeConfig};
use crate::policy::{ConditionerKind, PolicyConfig, PolicyNets};
use crate::seeding;

pub use ablate::{ablate, AblationRow, AblationSummary, AblationTable};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_into,
    save_checkpoint, Manifest, TensorEntry, CKPT_FORMAT,
};
pub use dataset::{
    build_dataset, generate_demos, Dataset, DemoSet, Episode, EpisodeMeta, DEMO_FORMAT,
};
pub use eval::{
    evaluate, Condition, Controller, EvalReport, ExpertController, OverrideSource,
    PolicyController, PolicyMemory, RolloutRecord, SeedResult, StepChoice, StepTelemetry,
};
pub use framing::{MAGIC, VERSION};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Which auxiliary terms stay switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Load balance and entropy.
    LE,
    /// Load balance only.
    L,
    /// Entropy only.
    E,
    /// Neither.
    N,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::LE, Self::L, Self::E, Self::N];

    /// `(λ, β)` after masking.
    pub fn mask(self, lambda: f64, beta: f64) -> (f64, f64) {
        match self {
            Self::LE => (lambda, beta),
            Self::L => (lambda, 0.0),
            Self::E => (0.0, beta),
            Self::N => (0.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LE => "LE",
            Self::L => "L",
            Self::E => "E",
            Self::N => "N",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the final step.
    Cosine {
        warmup_steps: usize,
    },
}

impl LrSchedule {
    /// Multiplier for optimiser step `step` (0-based) of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    (step + 1) as f64 / warmup_steps as f64
                } else if total <= warmup_steps {
                    1.0
                } else {
                    let p = (step - warmup_steps) as f64 / (total - warmup_steps) as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimiser steps have run.
    pub max_steps: Option<usize>,
    /// Epochs between checkpoints and evaluations; 0 disables both.
    pub eval_every: usize,
    pub num_eval_rollouts: usize,
    pub seeds: Vec<u64>,
    pub ablation_variant: AblationVariant,
    pub policy: PolicyConfig,
    pub optimizer: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 150,
            max_steps: None,
            eval_every: 10,
            num_eval_rollouts: 50,
            seeds: vec![0, 1, 2],
            ablation_variant: AblationVariant::LE,
            policy: PolicyConfig::default(),
            optimizer: AdamConfig::default(),
            lr_schedule: LrSchedule::Cosine { warmup_steps: 500 },
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} outside [0, 1)",
                self.ema_decay
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.policy.validate()
    }

    /// MoE settings with the ablation mask applied to `λ` and `β`.
    pub fn masked_moe(&self) -> MoeConfig {
        let mut moe = self.policy.moe.clone();
        let (l, b) = self
            .ablation_variant
            .mask(moe.lambda_load, moe.beta_entropy);
        moe.lambda_load = l;
        moe.beta_entropy = b;
        moe
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_diff: f64,
    pub l_load: f64,
    pub l_entropy: f64,
    /// `λ·L_load + β·L_entropy` after masking.
    pub l_aux: f64,
    pub l_total: f64,
    /// Dispatch fraction per expert; empty for the dense baseline.
    pub f: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
}

/// Snapshot handed to the training hook every `eval_every` epochs.
pub struct Checkpoint<'a> {
    pub epoch: usize,
    pub step: usize,
    pub raw: &'a PolicyNets,
    pub ema: &'a PolicyNets,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub raw: PolicyNets,
    pub ema: PolicyNets,
    pub metrics: Vec<StepMetrics>,
    pub steps: usize,
    pub run_dir: Option<PathBuf>,
}

/// Trains with [`train_with_hook`] and no hook.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with_hook(config, dataset, seed, out_dir, |_| Ok(()))
}

/// Minimises `L_diff + λ·L_load + β·L_entropy` over `dataset`.
///
/// Each epoch reshuffles the pairs and drops the final partial batch. With
/// `out_dir`, metrics go to `metrics.jsonl` and EMA and raw checkpoints are
/// written every `eval_every` epochs and at the end; `hook` runs at the same
/// points.
pub fn train_with_hook<F>(
    config: &TrainConfig,
    dataset: &Dataset,
    seed: u64,
    out_dir: Option<&Path>,
    mut hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint<'_>) -> Result<()>,
{
    config.validate()?;
    let pc = &config.policy;
    if dataset.obs_width != pc.encoder_input_dim() || dataset.act_width != pc.chunk_dim() {
        return Err(Error::Contract(format!(
            "dataset windows are {}/{} wide, the policy expects {}/{}",
            dataset.obs_width,
            dataset.act_width,
            pc.encoder_input_dim(),
            pc.chunk_dim()
        )));
    }
    let b = config.batch_size;
    let per_epoch = dataset.len() / b;
    if per_epoch == 0 {
        return Err(Error::Contract(format!(
            "dataset of {} pairs is smaller than one batch of {b}",
            dataset.len()
        )));
    }

    let mut nets = PolicyNets::new(pc.clone(), seeding::derive(seed, INIT_STREAM))?;
    nets.obs_norm = dataset.obs_norm.clone();
    nets.act_norm = dataset.act_norm.clone();
    let mut shuffle_rng = seeding::rng(seeding::derive(seed, SHUFFLE_STREAM));
    let mut noise_rng = seeding::rng(seeding::derive(seed, NOISE_STREAM));
    let mut adam = AdamState::new(config.optimizer, nets.store.tensors());
    let mut ema = Ema::new(&nets.store, config.ema_decay);
    let masked = config.masked_moe();
    let is_moe = pc.conditioner == ConditionerKind::Moe;

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = File::options()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    let total_steps = limit.min(config.epochs * per_epoch);
    let mut ema_nets = nets.clone();

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(b) {
            if step >= limit {
                break 'epochs;
            }
            let batch = dataset.batch(chunk)?;
            let lr = config.optimizer.learning_rate * config.lr_schedule.factor(step, total_steps);
            adam.config.learning_rate = lr;
            let mut g = Graph::training(&nets.store);
            let ranges = || {
                format!(
                    "batch obs range [{:.4}, {:.4}] action range [{:.4}, {:.4}]",
                    min_of(batch.obs.data()),
                    max_of(batch.obs.data()),
                    min_of(batch.actions.data()),
                    max_of(batch.actions.data()),
                )
            };
            let dl = match nets.diffusion_loss(&mut g, &batch, &mut noise_rng) {
                Ok(dl) => dl,
                Err(Error::Numeric(msg)) => {
                    return Err(Error::Aborted {
                        step,
                        diagnostic: format!(
                            "epoch {epoch}: {msg}; l_diff not computed; {}",
                            ranges()
                        ),
                    })
                }
                Err(e) => return Err(e),
            };
            let l_diff = g.tape.value(dl.loss).item();
            let (total, l_load, l_entropy, l_aux, f) = match dl.conditioning.probs {
                Some(probs) if is_moe => {
                    let stats = batch_stats(
                        &dl.conditioning.decisions,
                        masked.top_k,
                        masked.count_all_selected,
                    )?;
                    let aux = auxiliary_loss(&mut g.tape, probs, &stats, &masked)?;
                    let total = g.tape.add(dl.loss, aux.total)?;
                    let l_aux =
                        masked.lambda_load * aux.l_load + masked.beta_entropy * aux.l_entropy;
                    (
                        total,
                        aux.l_load,
                        aux.l_entropy,
                        l_aux,
                        stats.dispatch_fraction,
                    )
                }
                _ => (dl.loss, 0.0, 0.0, 0.0, Vec::new()),
            };
            let l_total = g.tape.value(total).item();
            if !l_total.is_finite() {
                return Err(Error::Aborted {
                    step,
                    diagnostic: format!(
                        "epoch {epoch}: l_diff={l_diff} l_load={l_load} l_entropy={l_entropy} \
                         f={f:?} {}",
                        ranges()
                    ),
                });
            }
            g.tape.backward(total)?;
            let grads = g.param_grads()?;
            drop(g);
            nets.store.set_grads(grads)?;
            adam_step_store(&mut nets.store, &mut adam)?;
            ema.update(&nets.store);

            let m = StepMetrics {
                step,
                epoch,
                l_diff,
                l_load,
                l_entropy,
                l_aux,
                l_total,
                f,
                lr,
                batch_size: chunk.len(),
            };
            if let Some((w, path)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
            metrics.push(m);
            step += 1;
        }
        let last = epoch + 1 == config.epochs;
        if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 && !last {
            ema_nets.store.copy_values_from(&ema.shadow)?;
            snapshot(out_dir, epoch + 1, step, &nets, &ema_nets, &mut hook)?;
        }
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }
    ema_nets.store.copy_values_from(&ema.shadow)?;
    let final_epoch = config.epochs.min(step.div_ceil(per_epoch));
    snapshot(out_dir, final_epoch, step, &nets, &ema_nets, &mut hook)?;
    if let Some(dir) = out_dir {
        save_checkpoint(&ema_nets, &dir.join("final.ckpt"))?;
        save_checkpoint(&nets, &dir.join("final-raw.ckpt"))?;
    }
    Ok(TrainOutcome {
        raw: nets,
        ema: ema_nets,
        metrics,
        steps: step,
        run_dir: out_dir.map(Path::to_path_buf),
    })
}

fn snapshot<F>(
    out_dir: Option<&Path>,
    epoch: usize,
    step: usize,
    raw: &PolicyNets,
    ema: &PolicyNets,
    hook: &mut F,
) -> Result<()>
where
    F: FnMut(&Checkpoint<'_>) -> Result<()>,
{
    if let Some(dir) = out_dir {
        save_checkpoint(ema, &dir.join(format!("epoch-{epoch:04}.ckpt")))?;
        save_checkpoint(raw, &dir.join(format!("epoch-{epoch:04}-raw.ckpt")))?;
    }
    hook(&Checkpoint {
        epoch,
        step,
        raw,
        ema,
    })
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
