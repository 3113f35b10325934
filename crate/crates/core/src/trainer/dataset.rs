//! Demonstration episodes, the `modp-demo-v1` file format and sliding-window
//! training pairs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::framing::{self, f32_round, index_error};
use crate::blockworld::{rollout_expert, DisturbanceSpec, ExpertTrace, StageLabel, TaskSpec};
use crate::diffkit::Tensor;
use crate::error::{Error, FormatError, Result};
use crate::policy::{Batch, ChunkingConfig, Normalizer};
use crate::seeding;

pub const DEMO_FORMAT: &str = "modp-demo-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task_id: String,
    pub seed: u64,
    pub disturbed: bool,
    pub success: bool,
}

/// One recorded episode; every value is representable as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub stages: Vec<u8>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn from_trace(trace: &ExpertTrace, task: &TaskSpec, seed: u64, disturbed: bool) -> Self {
        let round = |v: &[f64]| v.iter().map(|&x| f32_round(x)).collect::<Vec<_>>();
        Self {
            observations: trace.observations.iter().map(|o| round(o)).collect(),
            actions: trace.actions.iter().map(|a| round(a)).collect(),
            stages: trace.stages.iter().map(|s| s.code()).collect(),
            meta: EpisodeMeta {
                task_id: task.task_id.clone(),
                seed,
                disturbed,
                success: trace.success,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Scripted-expert demonstrations. Episode `i` tries environment seeds
/// `derive_path(seed, [i, attempt])` until one succeeds; returns the
/// episodes and the number of failed attempts that were resampled.
pub fn generate_demos(
    task: &TaskSpec,
    n: usize,
    noise: f64,
    seed: u64,
    max_retries: usize,
) -> Result<(Vec<Episode>, usize)> {
    task.validate()?;
    let mut episodes = Vec::with_capacity(n);
    let mut failures = 0;
    for i in 0..n {
        let mut done = false;
        for attempt in 0..=max_retries {
            let env_seed = seeding::derive_path(seed, &[i as u64, attempt as u64]);
            let trace = rollout_expert(task, env_seed, noise, &DisturbanceSpec::none())?;
            if trace.success {
                episodes.push(Episode::from_trace(&trace, task, env_seed, false));
                done = true;
                break;
            }
            failures += 1;
        }
        if !done {
            return Err(Error::State(format!(
                "expert failed demonstration {i} after {} attempts",
                max_retries + 1
            )));
        }
    }
    Ok((episodes, failures))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRef {
    offset: usize,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeIndex {
    #[serde(flatten)]
    meta: EpisodeMeta,
    length: usize,
    observations: ArrayRef,
    actions: ArrayRef,
    stages: ArrayRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoHeader {
    format: String,
    task: TaskSpec,
    num_episodes: usize,
    obs_dim: usize,
    act_dim: usize,
    stage_codes: BTreeMap<u8, String>,
    episodes: Vec<EpisodeIndex>,
    payload_bytes: usize,
    crc32: u32,
}

/// Demonstrations together with the task they were recorded on.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub task: TaskSpec,
    pub episodes: Vec<Episode>,
}

impl DemoSet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let obs_dim = self.task.obs_dim();
        let act_dim = crate::blockworld::ACTION_DIM;
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.episodes.len());
        for (i, ep) in self.episodes.iter().enumerate() {
            let t = ep.len();
            if ep.observations.len() != t || ep.stages.len() != t {
                return Err(Error::Contract(format!("episode {i} has ragged arrays")));
            }
            if let Some(row) = ep.observations.iter().find(|o| o.len() != obs_dim) {
                return Err(Error::dim("demo observations", &[row.len()], &[obs_dim]));
            }
            if let Some(row) = ep.actions.iter().find(|a| a.len() != act_dim) {
                return Err(Error::dim("demo actions", &[row.len()], &[act_dim]));
            }
            let obs_off = payload.len();
            framing::push_f32(&mut payload, ep.observations.iter().flatten().copied());
            let act_off = payload.len();
            framing::push_f32(&mut payload, ep.actions.iter().flatten().copied());
            let stage_off = payload.len();
            payload.extend_from_slice(&ep.stages);
            let arr = |offset, shape: Vec<usize>, dtype: &str| ArrayRef {
                offset,
                shape,
                dtype: dtype.into(),
            };
            index.push(EpisodeIndex {
                meta: ep.meta.clone(),
                length: t,
                observations: arr(obs_off, vec![t, obs_dim], "f32"),
                actions: arr(act_off, vec![t, act_dim], "f32"),
                stages: arr(stage_off, vec![t], "u8"),
            });
        }
        let header = DemoHeader {
            format: DEMO_FORMAT.into(),
            task: self.task.clone(),
            num_episodes: self.episodes.len(),
            obs_dim,
            act_dim,
            stage_codes: StageLabel::all(self.task.num_objects)
                .into_iter()
                .map(|l| (l.code(), l.to_string()))
                .collect(),
            episodes: index,
            payload_bytes: payload.len(),
            crc32: 0,
        };
        framing::seal(header, |h| &mut h.crc32, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (DemoHeader, _) = framing::decode(bytes)?;
        framing::expect_format(DEMO_FORMAT, &header.format)?;
        if payload.len() < header.payload_bytes {
            return Err(FormatError::Truncated {
                needed: header.payload_bytes,
                available: payload.len(),
            }
            .into());
        }
        if payload.len() > header.payload_bytes {
            return Err(index_error(
                "<payload>",
                "trailing bytes after the declared payload",
            ));
        }
        framing::verify_seal(&header, |h| &mut h.crc32, payload)?;
        header
            .task
            .validate()
            .map_err(|e| FormatError::Header(e.to_string()))?;
        if header.num_episodes != header.episodes.len() {
            return Err(FormatError::Header(format!(
                "num_episodes {} but {} index entries",
                header.num_episodes,
                header.episodes.len()
            ))
            .into());
        }
        if header.obs_dim != header.task.obs_dim()
            || header.act_dim != crate::blockworld::ACTION_DIM
        {
            return Err(FormatError::Header(format!(
                "array widths {}x{} do not match the task",
                header.obs_dim, header.act_dim
            ))
            .into());
        }
        let mut episodes = Vec::with_capacity(header.episodes.len());
        for (i, e) in header.episodes.iter().enumerate() {
            let name = format!("episode {i}");
            let check = |a: &ArrayRef, shape: &[usize], dtype: &str, what: &str| -> Result<()> {
                if a.shape != shape || a.dtype != dtype {
                    return Err(index_error(
                        &name,
                        format!(
                            "{what} declared {:?}/{}, expected {shape:?}/{dtype}",
                            a.shape, a.dtype
                        ),
                    ));
                }
                Ok(())
            };
            let t = e.length;
            check(&e.observations, &[t, header.obs_dim], "f32", "observations")?;
            check(&e.actions, &[t, header.act_dim], "f32", "actions")?;
            check(&e.stages, &[t], "u8", "stages")?;
            let obs = framing::read_f32(payload, e.observations.offset, t * header.obs_dim, &name)?;
            let act = framing::read_f32(payload, e.actions.offset, t * header.act_dim, &name)?;
            let end = e.stages.offset + t;
            if end > payload.len() {
                return Err(FormatError::Truncated {
                    needed: end,
                    available: payload.len(),
                }
                .into());
            }
            let stages = payload[e.stages.offset..end].to_vec();
            if let Some(bad) = stages
                .iter()
                .find(|&&c| !header.stage_codes.contains_key(&c))
            {
                return Err(index_error(&name, format!("unknown stage code {bad}")));
            }
            episodes.push(Episode {
                observations: obs.chunks(header.obs_dim).map(<[f64]>::to_vec).collect(),
                actions: act.chunks(header.act_dim).map(<[f64]>::to_vec).collect(),
                stages,
                meta: e.meta.clone(),
            });
        }
        Ok(Self {
            task: header.task,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        framing::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&framing::read_file(path)?)
    }
}

/// Normalised sliding-window training pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `len × (T_o·obs_dim)`, row-major.
    pub obs: Vec<f64>,
    /// `len × (T_a·act_dim)`, row-major.
    pub actions: Vec<f64>,
    /// Stage code at each window's current timestep.
    pub stages: Vec<u8>,
    pub obs_width: usize,
    pub act_width: usize,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
    /// Episodes shorter than two steps that were left out.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut obs = Vec::with_capacity(indices.len() * self.obs_width);
        let mut act = Vec::with_capacity(indices.len() * self.act_width);
        for &i in indices {
            obs.extend_from_slice(&self.obs[i * self.obs_width..(i + 1) * self.obs_width]);
            act.extend_from_slice(&self.actions[i * self.act_width..(i + 1) * self.act_width]);
        }
        Ok(Batch {
            obs: Tensor::new(vec![indices.len(), self.obs_width], obs)?,
            actions: Tensor::new(vec![indices.len(), self.act_width], act)?,
        })
    }

    /// Dataset from explicit raw windows, normalised with the given maps.
    pub fn from_windows(
        obs_windows: &[Vec<f64>],
        action_chunks: &[Vec<f64>],
        obs_norm: Normalizer,
        act_norm: Normalizer,
    ) -> Result<Self> {
        if obs_windows.is_empty() || obs_windows.len() != action_chunks.len() {
            return Err(Error::Contract(format!(
                "{} observation windows for {} action chunks",
                obs_windows.len(),
                action_chunks.len()
            )));
        }
        let obs_width = obs_windows[0].len();
        let act_width = action_chunks[0].len();
        let mut obs = Vec::with_capacity(obs_windows.len() * obs_width);
        let mut actions = Vec::with_capacity(action_chunks.len() * act_width);
        for (o, a) in obs_windows.iter().zip(action_chunks) {
            if o.len() != obs_width || a.len() != act_width {
                return Err(Error::dim(
                    "dataset window",
                    &[o.len(), a.len()],
                    &[obs_width, act_width],
                ));
            }
            obs.extend(obs_norm.normalize_flat(o));
            actions.extend(act_norm.normalize_flat(a));
        }
        Ok(Self {
            obs,
            actions,
            stages: vec![StageLabel::Done.code(); obs_windows.len()],
            obs_width,
            act_width,
            obs_norm,
            act_norm,
            skipped: 0,
        })
    }
}

/// One pair per timestep of every episode: the `T_o` observations ending at
/// `t` (the first observation repeated before the start) and the `T_a`
/// actions starting at `t` (the last action repeated past the end).
/// Normalisation bounds are fitted over all recorded observations/actions.
pub fn build_dataset(episodes: &[Episode], chunking: &ChunkingConfig) -> Result<Dataset> {
    chunking.validate()?;
    let usable: Vec<&Episode> = episodes.iter().filter(|e| e.len() >= 2).collect();
    let skipped = episodes.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} episodes shorter than 2 steps");
    }
    if usable.is_empty() {
        return Err(Error::Contract(
            "no usable episodes to build a dataset from".into(),
        ));
    }
    let obs_norm = Normalizer::fit(
        usable
            .iter()
            .flat_map(|e| e.observations.iter().map(Vec::as_slice)),
    )?;
    let act_norm = Normalizer::fit(
        usable
            .iter()
            .flat_map(|e| e.actions.iter().map(Vec::as_slice)),
    )?;
    let (to, ta) = (chunking.obs_horizon, chunking.action_horizon);
    let obs_dim = obs_norm.dim();
    let act_dim = act_norm.dim();
    let total: usize = usable.iter().map(|e| e.len()).sum();
    let mut obs = Vec::with_capacity(total * to * obs_dim);
    let mut actions = Vec::with_capacity(total * ta * act_dim);
    let mut stages = Vec::with_capacity(total);
    for ep in usable {
        let t_max = ep.len();
        let norm_obs: Vec<Vec<f64>> = ep
            .observations
            .iter()
            .map(|o| obs_norm.normalize(o))
            .collect();
        let norm_act: Vec<Vec<f64>> = ep.actions.iter().map(|a| act_norm.normalize(a)).collect();
        for t in 0..t_max {
            for j in 0..to {
                let src = (t + j + 1).saturating_sub(to);
                obs.extend_from_slice(&norm_obs[src]);
            }
            for j in 0..ta {
                actions.extend_from_slice(&norm_act[(t + j).min(t_max - 1)]);
            }
            stages.push(ep.stages[t]);
        }
    }
    Ok(Dataset {
        obs,
        actions,
        stages,
        obs_width: to * obs_dim,
        act_width: ta * act_dim,
        obs_norm,
        act_norm,
        skipped,
    })
}
