//! Independent reference implementations used as test oracles. Nothing here
//! calls into the tape; every quantity is recomputed with plain loops.

#![allow(dead_code)]

use modp::diffkit::{Mlp, ParamStore};
use modp::moe::MoeLayer;

pub mod ops;

/// `x · W + b` with `W` stored row-major as `[in × out]`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    if let Some(b) = b {
        for j in 0..out {
            y[j] += b[j];
        }
    }
    y
}

pub fn mlp(store: &ParamStore, net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, layer) in net.layers.iter().enumerate() {
        let w = store.get(layer.weight).data();
        let b = layer.bias.map(|id| store.get(id).data());
        h = linear(&h, w, b, layer.out_dim);
        if li + 1 < net.layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Repeated strict-max scan: the first (lowest-index) maximum among the
/// remaining entries is taken each round.
pub fn brute_top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; p.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..p.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| p[i] > p[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub struct OracleRoute {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub output: Vec<f64>,
}

/// Sort-and-combine evaluation of a mixture layer for one sample.
pub fn route(
    store: &ParamStore,
    layer: &MoeLayer,
    z: &[f64],
    forced: Option<usize>,
) -> OracleRoute {
    let n = layer.config.num_experts;
    let w = store.get(layer.router).data();
    let probs = softmax(&linear(z, w, None, n));
    let (selected, weights): (Vec<usize>, Vec<f64>) = match forced {
        Some(j) => (vec![j], vec![1.0]),
        None => {
            let sel = brute_top_k(&probs, layer.config.top_k);
            let mut ws: Vec<f64> = sel.iter().map(|&i| probs[i]).collect();
            if layer.config.renormalize_topk {
                let s: f64 = ws.iter().sum();
                ws.iter_mut().for_each(|x| *x /= s);
            }
            (sel, ws)
        }
    };
    let mut output = vec![0.0; z.len()];
    for (&i, &wi) in selected.iter().zip(&weights) {
        let y = mlp(store, &layer.experts[i], z);
        for (o, yi) in output.iter_mut().zip(y) {
            *o += wi * yi;
        }
    }
    OracleRoute {
        probs,
        selected,
        output,
    }
}

/// Central finite difference of `f` with respect to every entry of `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

pub mod composed {
    use modp::diffkit::{Graph, ParamStore, Tensor};
    use modp::moe::{auxiliary_loss, batch_stats, top_k, MoeConfig};
    use modp::policy::{Batch, ChunkingConfig, PolicyConfig, PolicyNets, ScheduleConfig};
    use modp::seeding;
    use rand::Rng;

    pub fn tiny_config() -> PolicyConfig {
        PolicyConfig {
            obs_dim: 3,
            act_dim: 2,
            encoder_hidden: 5,
            denoiser_hidden: 6,
            timestep_dim: 4,
            moe: MoeConfig {
                num_experts: 4,
                top_k: 2,
                feature_dim: 4,
                expert_hidden_dim: 3,
                ..MoeConfig::default()
            },
            chunking: ChunkingConfig {
                obs_horizon: 2,
                action_horizon: 2,
                execute_horizon: 1,
            },
            schedule: ScheduleConfig {
                num_steps: 10,
                ..ScheduleConfig::default()
            },
            ..PolicyConfig::default()
        }
    }

    /// Total training loss `L_diff + λ·L_load + β·L_entropy` at fixed draws.
    fn total_loss(
        nets: &PolicyNets,
        store: &ParamStore,
        batch: &Batch,
        ks: &[usize],
        eps: &Tensor,
        track: bool,
    ) -> (f64, Option<Vec<Vec<f64>>>, f64) {
        let mut g = if track {
            Graph::training(store)
        } else {
            Graph::inference(store)
        };
        let out = nets
            .diffusion_loss_at(&mut g, batch, ks, eps, None)
            .unwrap();
        let moe = nets.moe().unwrap();
        let stats = batch_stats(&out.conditioning.decisions, moe.config.top_k, false).unwrap();
        let probs = out.conditioning.probs.unwrap();
        let aux = auxiliary_loss(&mut g.tape, probs, &stats, &moe.config).unwrap();
        let total = g.tape.add(out.loss, aux.total).unwrap();
        let v = g.tape.value(total).item();
        let margin = out
            .conditioning
            .decisions
            .iter()
            .map(|d| {
                let order = top_k(&d.probabilities, d.probabilities.len());
                let p = |i: usize| d.probabilities[order[i]];
                (p(0) - p(1)).min(p(moe.config.top_k - 1) - p(moe.config.top_k))
            })
            .fold(f64::INFINITY, f64::min);
        let grads = track.then(|| {
            g.tape.backward(total).unwrap();
            g.param_grads().unwrap()
        });
        (v, grads, margin)
    }

    /// Worst relative error between analytic and central-difference
    /// gradients of the composed encoder → MoE → denoiser loss over every
    /// parameter. `None` when the draw sits within `1e-3` of a routing tie,
    /// where the loss is not differentiable.
    pub fn fd_case(seed: u64) -> Option<f64> {
        let cfg = tiny_config();
        let nets = PolicyNets::new(cfg.clone(), seed).unwrap();
        let mut rng = seeding::rng(seeding::derive(seed, 1));
        let b = 3;
        let batch = Batch {
            obs: Tensor::randn(&[b, cfg.encoder_input_dim()], 1.0, &mut rng),
            actions: Tensor::randn(&[b, cfg.chunk_dim()], 0.5, &mut rng),
        };
        let ks: Vec<usize> = (0..b).map(|_| rng.random_range(0..10)).collect();
        let eps = Tensor::randn(&[b, cfg.chunk_dim()], 1.0, &mut rng);
        let (_, grads, margin) = total_loss(&nets, &nets.store, &batch, &ks, &eps, true);
        if margin < 1e-3 {
            return None;
        }
        let grads = grads.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut store = nets.store.clone();
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let orig = store.tensors()[pi].data()[j];
                store.tensors_mut()[pi].data_mut()[j] = orig + h;
                let up = total_loss(&nets, &store, &batch, &ks, &eps, false).0;
                store.tensors_mut()[pi].data_mut()[j] = orig - h;
                let down = total_loss(&nets, &store, &batch, &ks, &eps, false).0;
                store.tensors_mut()[pi].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(super::rel_err(g[j], numeric));
            }
        }
        Some(worst)
    }
}
