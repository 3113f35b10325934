//! Diffusion action head conditioned on the mixture-of-experts features.
//!
//! The encoder maps a stacked observation history to `z`; the conditioner
//! (the MoE layer, or a dense perceptron of matching size for the baseline)
//! maps `z` to `z'`; the denoiser predicts the noise added to a normalised
//! action chunk from `[noised chunk, z', timestep embedding]`, with a
//! residual connection from the noised chunk to its output.

mod normalize;
mod sampler;
mod schedule;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffkit::{sinusoidal_embedding, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{GateDecision, MoeConfig, MoeLayer};
use crate::seeding;

pub use normalize::{Normalizer, MIN_RANGE};
pub use sampler::{act, ChunkBuffer, ObsHistory, SampledChunk};
pub use schedule::{NoiseSchedule, ScheduleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkingConfig {
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub execute_horizon: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            obs_horizon: 2,
            action_horizon: 16,
            execute_horizon: 8,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_horizon == 0
            || self.execute_horizon == 0
            || self.execute_horizon > self.action_horizon
        {
            return Err(Error::Config(format!(
                "need obs_horizon >= 1 and 1 <= execute_horizon <= action_horizon, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionerKind {
    /// Sparse mixture of experts.
    Moe,
    /// Single perceptron with hidden width `num_experts · expert_hidden_dim`.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub encoder_hidden: usize,
    pub denoiser_hidden: usize,
    pub timestep_dim: usize,
    pub conditioner: ConditionerKind,
    pub moe: MoeConfig,
    pub chunking: ChunkingConfig,
    pub schedule: ScheduleConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            obs_dim: 14,
            act_dim: 3,
            encoder_hidden: 128,
            denoiser_hidden: 256,
            timestep_dim: 32,
            conditioner: ConditionerKind::Moe,
            moe: MoeConfig::default(),
            chunking: ChunkingConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        self.chunking.validate()?;
        if self.obs_dim == 0 || self.act_dim == 0 {
            return Err(Error::Config("obs_dim and act_dim must be positive".into()));
        }
        if self.timestep_dim < 2 || !self.timestep_dim.is_multiple_of(2) {
            return Err(Error::Config("timestep_dim must be even and >= 2".into()));
        }
        if self.encoder_hidden == 0 || self.denoiser_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.chunking.obs_horizon * self.obs_dim
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunking.action_horizon * self.act_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.moe.feature_dim
    }
}

#[derive(Clone, Debug)]
pub enum Conditioner {
    Moe(MoeLayer),
    Dense(Mlp),
}

/// Encoder, conditioner and denoiser together with their parameters and
/// the data normalisation they were trained under.
#[derive(Clone, Debug)]
pub struct PolicyNets {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub conditioner: Conditioner,
    pub denoiser: Mlp,
    pub schedule: NoiseSchedule,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
}

/// Conditioning for a batch of observation histories.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// `[B × feature_dim]`.
    pub z_prime: Var,
    /// Router probabilities `[B × N]`; absent for the dense baseline.
    pub probs: Option<Var>,
    /// One per sample; empty for the dense baseline.
    pub decisions: Vec<GateDecision>,
}

/// Normalised training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B × T_o·obs_dim]`, oldest observation first.
    pub obs: Tensor,
    /// `[B × T_a·act_dim]`.
    pub actions: Tensor,
}

#[derive(Clone, Debug)]
pub struct DiffusionLoss {
    pub loss: Var,
    pub conditioning: Conditioning,
}

impl PolicyNets {
    /// Builds freshly initialised networks; parameter names and values are
    /// a pure function of `config` and `seed`.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seed);
        let mut store = ParamStore::new();
        let f = config.feature_dim();
        let encoder = Mlp::new(
            &mut store,
            "encoder",
            &[config.encoder_input_dim(), config.encoder_hidden, f],
            &mut rng,
        );
        let conditioner = match config.conditioner {
            ConditionerKind::Moe => Conditioner::Moe(MoeLayer::new(
                &mut store,
                "moe",
                config.moe.clone(),
                &mut rng,
            )?),
            ConditionerKind::Dense => {
                let hidden = config.moe.num_experts * config.moe.expert_hidden_dim;
                Conditioner::Dense(Mlp::new(&mut store, "dense", &[f, hidden, f], &mut rng))
            }
        };
        let h = config.denoiser_hidden;
        let denoiser = Mlp::new(
            &mut store,
            "denoiser",
            &[
                config.chunk_dim() + f + config.timestep_dim,
                h,
                h,
                config.chunk_dim(),
            ],
            &mut rng,
        );
        let schedule = NoiseSchedule::linear(&config.schedule)?;
        Ok(Self {
            obs_norm: Normalizer::identity(config.obs_dim),
            act_norm: Normalizer::identity(config.act_dim),
            config,
            store,
            encoder,
            conditioner,
            denoiser,
            schedule,
        })
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match &self.conditioner {
            Conditioner::Moe(m) => Some(m),
            Conditioner::Dense(_) => None,
        }
    }

    fn check_cols(&self, what: &'static str, t: &Tensor, cols: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != cols {
            return Err(Error::dim(what, t.shape(), &[t.shape()[0], cols]));
        }
        Ok(())
    }

    /// `z` for a `[B × T_o·obs_dim]` batch of normalised histories.
    pub fn encode_batch(&self, g: &mut Graph<'_>, obs: &Tensor) -> Result<Var> {
        self.check_cols("encode", obs, self.config.encoder_input_dim())?;
        let x = g.tape.constant(obs.clone());
        self.encoder.forward(g, x)
    }

    /// Encodes one raw history of exactly `T_o` observations.
    pub fn encode(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        let flat = self.flatten_history(history)?;
        let mut g = Graph::inference(&self.store);
        let obs = Tensor::new(vec![1, flat.len()], flat)?;
        let z = self.encode_batch(&mut g, &obs)?;
        Ok(g.tape.value(z).data().to_vec())
    }

    /// Normalised, oldest-first concatenation of a raw history.
    pub fn flatten_history(&self, history: &[Vec<f64>]) -> Result<Vec<f64>> {
        let to = self.config.chunking.obs_horizon;
        if history.len() != to {
            return Err(Error::Contract(format!(
                "observation history has {} entries, expected {to}",
                history.len()
            )));
        }
        let mut flat = Vec::with_capacity(to * self.config.obs_dim);
        for o in history {
            if o.len() != self.config.obs_dim {
                return Err(Error::dim(
                    "observation",
                    &[o.len()],
                    &[self.config.obs_dim],
                ));
            }
            flat.extend(self.obs_norm.normalize(o));
        }
        Ok(flat)
    }

    /// Encoder followed by the conditioner.
    pub fn condition(
        &self,
        g: &mut Graph<'_>,
        obs: &Tensor,
        forced: Option<&[Option<usize>]>,
    ) -> Result<Conditioning> {
        let z = self.encode_batch(g, obs)?;
        match &self.conditioner {
            Conditioner::Moe(moe) => {
                let r = moe.route(g, z, forced)?;
                Ok(Conditioning {
                    z_prime: r.output,
                    probs: Some(r.probs),
                    decisions: r.decisions,
                })
            }
            Conditioner::Dense(mlp) => {
                if forced.is_some_and(|f| f.iter().any(Option::is_some)) {
                    return Err(Error::Contract(
                        "expert overrides need a mixture-of-experts conditioner".into(),
                    ));
                }
                Ok(Conditioning {
                    z_prime: mlp.forward(g, z)?,
                    probs: None,
                    decisions: Vec::new(),
                })
            }
        }
    }

    /// Predicted noise for `[B × chunk]` noised chunks at steps `ks`.
    pub fn predict_noise(
        &self,
        g: &mut Graph<'_>,
        noised: Var,
        z_prime: Var,
        ks: &[usize],
    ) -> Result<Var> {
        let temb = g
            .tape
            .constant(sinusoidal_embedding(ks, self.config.timestep_dim));
        let input = g.tape.concat(&[noised, z_prime, temb])?;
        let out = self.denoiser.forward(g, input)?;
        g.tape.add(out, noised)
    }

    /// Mean squared noise-prediction error at explicit steps and noise.
    pub fn diffusion_loss_at(
        &self,
        g: &mut Graph<'_>,
        batch: &Batch,
        ks: &[usize],
        eps: &Tensor,
        forced: Option<&[Option<usize>]>,
    ) -> Result<DiffusionLoss> {
        let b = batch.obs.rows();
        let cd = self.config.chunk_dim();
        self.check_cols("diffusion_loss actions", &batch.actions, cd)?;
        if batch.actions.rows() != b || ks.len() != b || eps.shape() != batch.actions.shape() {
            return Err(Error::dim(
                "diffusion_loss",
                batch.actions.shape(),
                eps.shape(),
            ));
        }
        if b == 0 {
            return Err(Error::Contract("diffusion_loss on an empty batch".into()));
        }
        let mut noised = Vec::with_capacity(b * cd);
        for (r, &k) in ks.iter().enumerate() {
            noised.extend(
                self.schedule
                    .add_noise(batch.actions.row(r), k, eps.row(r))?,
            );
        }
        let conditioning = self.condition(g, &batch.obs, forced)?;
        let x = g.tape.constant(Tensor::new(vec![b, cd], noised)?);
        let pred = self.predict_noise(g, x, conditioning.z_prime, ks)?;
        let target = g.tape.constant(eps.clone());
        let diff = g.tape.sub(pred, target)?;
        let sq = g.tape.square(diff);
        let loss = g.tape.mean(sq);
        Ok(DiffusionLoss { loss, conditioning })
    }

    /// [`PolicyNets::diffusion_loss_at`] with per-sample steps drawn
    /// uniformly from `[0, K)` and standard Gaussian noise.
    pub fn diffusion_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<DiffusionLoss> {
        let b = batch.actions.rows();
        let ks: Vec<usize> = (0..b)
            .map(|_| rng.random_range(0..self.schedule.num_steps))
            .collect();
        let eps: Vec<f64> = (0..batch.actions.numel())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let eps = Tensor::new(batch.actions.shape().to_vec(), eps)?;
        self.diffusion_loss_at(g, batch, &ks, &eps, None)
    }

    /// Tape-free noise prediction used inside the sampling loop.
    fn predict_noise_fast(&self, noised: &[f64], z_prime: &Tensor, k: usize) -> Result<Vec<f64>> {
        let b = z_prime.rows();
        let cd = self.config.chunk_dim();
        let f = self.config.feature_dim();
        let td = self.config.timestep_dim;
        let temb = sinusoidal_embedding(&[k], td);
        let width = cd + f + td;
        let mut input = Vec::with_capacity(b * width);
        for r in 0..b {
            input.extend_from_slice(&noised[r * cd..(r + 1) * cd]);
            input.extend_from_slice(z_prime.row(r));
            input.extend_from_slice(temb.data());
        }
        let out = self
            .denoiser
            .infer(&self.store, &Tensor::new(vec![b, width], input)?)?;
        Ok(out.data().iter().zip(noised).map(|(o, x)| o + x).collect())
    }

    /// Ancestral sampling of one action chunk per history. Each sample draws
    /// its noise from its own seed, so results do not depend on batching.
    pub fn sample_action_chunks(
        &self,
        histories: &[Vec<Vec<f64>>],
        seeds: &[u64],
        forced: Option<&[Option<usize>]>,
    ) -> Result<Vec<SampledChunk>> {
        self.sample_inner(histories, seeds, forced, false)
    }

    fn sample_inner(
        &self,
        histories: &[Vec<Vec<f64>>],
        seeds: &[u64],
        forced: Option<&[Option<usize>]>,
        zero_conditioning: bool,
    ) -> Result<Vec<SampledChunk>> {
        let b = histories.len();
        if seeds.len() != b {
            return Err(Error::Contract(format!(
                "{} seeds for {b} histories",
                seeds.len()
            )));
        }
        if b == 0 {
            return Ok(Vec::new());
        }
        let mut flat = Vec::new();
        for h in histories {
            flat.extend(self.flatten_history(h)?);
        }
        let obs = Tensor::new(vec![b, self.config.encoder_input_dim()], flat)?;
        let mut g = Graph::inference(&self.store);
        let cond = self.condition(&mut g, &obs, forced)?;
        let mut z_prime = g.tape.value(cond.z_prime).clone();
        if zero_conditioning {
            z_prime.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }

        let cd = self.config.chunk_dim();
        let mut rngs: Vec<_> = seeds.iter().map(|&s| seeding::rng(s)).collect();
        let gauss = |rngs: &mut [rand_chacha::ChaCha8Rng]| -> Vec<f64> {
            rngs.iter_mut()
                .flat_map(|r| {
                    (0..cd)
                        .map(|_| StandardNormal.sample(r))
                        .collect::<Vec<f64>>()
                })
                .collect()
        };
        let mut x = gauss(&mut rngs);
        for k in (0..self.schedule.num_steps).rev() {
            let eps_hat = self.predict_noise_fast(&x, &z_prime, k)?;
            let z = if k > 0 {
                gauss(&mut rngs)
            } else {
                vec![0.0; x.len()]
            };
            self.schedule.ancestral_step(&mut x, &eps_hat, k, &z);
        }

        let ad = self.config.act_dim;
        let mut decisions = cond.decisions.into_iter();
        Ok((0..b)
            .map(|r| {
                let actions = x[r * cd..(r + 1) * cd]
                    .chunks(ad)
                    .map(|a| {
                        let clamped: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                        self.act_norm.denormalize(&clamped)
                    })
                    .collect();
                SampledChunk {
                    actions,
                    gate: decisions.next(),
                }
            })
            .collect())
    }

    /// Samples with `z'` replaced by zeros; used to check that the
    /// conditioning path actually influences the output.
    pub fn sample_without_conditioning(
        &self,
        histories: &[Vec<Vec<f64>>],
        seeds: &[u64],
    ) -> Result<Vec<SampledChunk>> {
        self.sample_inner(histories, seeds, None, true)
    }

    /// Single-history convenience wrapper.
    pub fn sample_action_chunk(
        &self,
        history: &[Vec<f64>],
        seed: u64,
        forced: Option<usize>,
    ) -> Result<SampledChunk> {
        let forced = forced.map(|j| vec![Some(j)]);
        let mut out = self.sample_action_chunks(&[history.to_vec()], &[seed], forced.as_deref())?;
        Ok(out.remove(0))
    }
}
