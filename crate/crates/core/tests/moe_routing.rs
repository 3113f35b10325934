mod common;

use modp::diffkit::{Graph, ParamStore, Tape, Tensor};
use modp::moe::{
    auxiliary_loss, batch_stats, entropy_loss, load_balance_loss, top_k, BatchGateStats,
    GateDecision, MoeConfig, MoeLayer,
};
use modp::seeding;
use modp::Error;
use proptest::prelude::*;
use rand::Rng;

fn layer(config: MoeConfig, seed: u64) -> (ParamStore, MoeLayer) {
    let mut store = ParamStore::new();
    let mut rng = seeding::rng(seed);
    let l = MoeLayer::new(&mut store, "moe", config, &mut rng).unwrap();
    (store, l)
}

fn small(n: usize, k: usize) -> MoeConfig {
    MoeConfig {
        num_experts: n,
        top_k: k,
        feature_dim: 6,
        expert_hidden_dim: 5,
        ..MoeConfig::default()
    }
}

fn random_batch(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = seeding::rng(seed);
    Tensor::randn(&[rows, cols], scale, &mut rng)
}

fn decision(p: &[f64]) -> GateDecision {
    GateDecision {
        probabilities: p.to_vec(),
        selected: top_k(p, 1),
        combine_weights: vec![p[top_k(p, 1)[0]]],
        overridden: false,
    }
}

#[test]
fn route_matches_sort_and_combine_oracle() {
    for seed in 0..30 {
        let cfg = small(8, 1 + (seed as usize % 3));
        let (store, l) = layer(cfg, seed);
        let z = random_batch(5, 6, 100 + seed, 2.0);
        let mut g = Graph::inference(&store);
        let zv = g.tape.constant(z.clone());
        let out = l.route(&mut g, zv, None).unwrap();
        let y = g.tape.value(out.output).clone();
        for r in 0..5 {
            let o = common::route(&store, &l, z.row(r), None);
            assert_eq!(out.decisions[r].selected, o.selected);
            for (a, b) in y.row(r).iter().zip(&o.output) {
                assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
            }
            for (a, b) in out.decisions[r].probabilities.iter().zip(&o.probs) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn top_k_equal_to_n_is_the_dense_mixture() {
    let (store, l) = layer(small(4, 4), 3);
    let z = random_batch(3, 6, 4, 1.0);
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(z.clone());
    let out = l.route(&mut g, zv, None).unwrap();
    for r in 0..3 {
        let p = &out.decisions[r].probabilities;
        let mut dense = [0.0; 6];
        for i in 0..4 {
            let y = common::mlp(&store, &l.experts[i], z.row(r));
            for c in 0..6 {
                dense[c] += p[i] * y[c];
            }
        }
        let got = g.tape.value(out.output).row(r).to_vec();
        for c in 0..6 {
            assert!((got[c] - dense[c]).abs() <= 1e-12);
        }
        let wsum: f64 = out.decisions[r].combine_weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }
}

/// Router weights chosen so that `z = e_0` yields probabilities
/// `[0.5, 0.3, 0.15, 0.05]`.
fn handcrafted() -> (ParamStore, MoeLayer, Vec<f64>) {
    let cfg = MoeConfig {
        num_experts: 4,
        top_k: 2,
        feature_dim: 4,
        expert_hidden_dim: 3,
        ..MoeConfig::default()
    };
    let (mut store, l) = layer(cfg, 11);
    let target = [0.5f64, 0.3, 0.15, 0.05];
    let w = store.get_mut(l.router).data_mut();
    w.iter_mut().for_each(|v| *v = 0.0);
    for (j, p) in target.iter().enumerate() {
        w[j] = p.ln();
    }
    (store, l, vec![1.0, 0.0, 0.0, 0.0])
}

#[test]
fn hand_evaluated_top_two() {
    let (store, l, z) = handcrafted();
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(Tensor::new(vec![1, 4], z.clone()).unwrap());
    let out = l.route(&mut g, zv, None).unwrap();
    let d = &out.decisions[0];
    assert_eq!(d.selected, vec![0, 1]);
    assert!((d.combine_weights[0] - 0.5).abs() < 1e-12);
    assert!((d.combine_weights[1] - 0.3).abs() < 1e-12);
    let e0 = common::mlp(&store, &l.experts[0], &z);
    let e1 = common::mlp(&store, &l.experts[1], &z);
    for c in 0..4 {
        let want = 0.5 * e0[c] + 0.3 * e1[c];
        assert!((g.tape.value(out.output).data()[c] - want).abs() < 1e-12);
    }
}

#[test]
fn override_forces_a_single_expert_and_keeps_probabilities() {
    let (store, l, z) = handcrafted();
    let zt = Tensor::new(vec![1, 4], z.clone()).unwrap();
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(zt.clone());
    let free = l.route(&mut g, zv, None).unwrap();
    let forced = l.route(&mut g, zv, Some(&[Some(3)])).unwrap();
    let d = &forced.decisions[0];
    assert_eq!(d.selected, vec![3]);
    assert_eq!(d.combine_weights, vec![1.0]);
    assert!(d.overridden);
    assert_eq!(d.probabilities, free.decisions[0].probabilities);
    assert_eq!(d.weight_vector(), vec![0.0, 0.0, 0.0, 1.0]);
    let e3 = common::mlp(&store, &l.experts[3], &z);
    for c in 0..4 {
        assert!((g.tape.value(forced.output).data()[c] - e3[c]).abs() < 1e-12);
    }
}

#[test]
fn override_out_of_range_is_a_contract_error() {
    let (store, l, z) = handcrafted();
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(Tensor::new(vec![1, 4], z).unwrap());
    assert!(matches!(
        l.route(&mut g, zv, Some(&[Some(4)])),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        l.route(&mut g, zv, Some(&[None, None])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn mixed_override_batch_matches_oracle_per_row() {
    let (store, l) = layer(small(6, 2), 21);
    let z = random_batch(4, 6, 22, 1.5);
    let forced = [None, Some(5), None, Some(0)];
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(z.clone());
    let out = l.route(&mut g, zv, Some(&forced)).unwrap();
    for r in 0..4 {
        let o = common::route(&store, &l, z.row(r), forced[r]);
        assert_eq!(out.decisions[r].selected, o.selected);
        for (a, b) in g.tape.value(out.output).row(r).iter().zip(&o.output) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn renormalized_weights_sum_to_one_and_match_oracle() {
    let cfg = MoeConfig {
        renormalize_topk: true,
        ..small(6, 3)
    };
    let (store, l) = layer(cfg, 5);
    let z = random_batch(4, 6, 6, 1.0);
    let mut g = Graph::inference(&store);
    let zv = g.tape.constant(z.clone());
    let out = l
        .route(&mut g, zv, Some(&[None, Some(2), None, None]))
        .unwrap();
    for r in 0..4 {
        let s: f64 = out.decisions[r].combine_weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let forced = if r == 1 { Some(2) } else { None };
        let o = common::route(&store, &l, z.row(r), forced);
        for (a, b) in g.tape.value(out.output).row(r).iter().zip(&o.output) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

fn route_loss_grads(cfg: MoeConfig, seed: u64) {
    let (store, l) = layer(cfg, seed);
    let z = random_batch(6, 6, seed + 1, 1.0);
    let loss_of = |s: &ParamStore, track: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = if track {
            Graph::training(s)
        } else {
            Graph::inference(s)
        };
        let zv = g.tape.constant(z.clone());
        let out = l.route(&mut g, zv, None).unwrap();
        let sq = g.tape.square(out.output);
        let ld = g.tape.mean(sq);
        let stats = batch_stats(&out.decisions, l.config.top_k, false).unwrap();
        let aux = auxiliary_loss(&mut g.tape, out.probs, &stats, &l.config).unwrap();
        let total = g.tape.add(ld, aux.total).unwrap();
        let v = g.tape.value(total).item();
        if track {
            g.tape.backward(total).unwrap();
            let grads = g.param_grads().unwrap();
            (v, Some(grads[l.router.index()].clone()))
        } else {
            (v, None)
        }
    };
    let (_, grads) = loss_of(&store, true);
    let analytic = grads.unwrap();
    let w0 = store.get(l.router).data().to_vec();
    let numeric = common::finite_diff(&w0, 1e-5, |w| {
        let mut s = store.clone();
        s.get_mut(l.router).data_mut().copy_from_slice(w);
        loss_of(&s, false).0
    });
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(
            common::rel_err(*a, *n) <= 1e-4,
            "analytic {a} vs numeric {n}"
        );
    }
}

#[test]
fn router_gradient_matches_finite_differences() {
    // top-k selections stay fixed under ±1e-5 perturbations for these seeds
    route_loss_grads(small(5, 2), 40);
    route_loss_grads(
        MoeConfig {
            renormalize_topk: true,
            ..small(5, 2)
        },
        41,
    );
}

#[test]
fn entropy_and_load_gradients_match_finite_differences() {
    let mut rng = seeding::rng(9);
    let logits = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let f = vec![0.5, 0.0, 0.25, 0.25, 0.0];
    let stats = BatchGateStats {
        dispatch_fraction: f.clone(),
        mean_probability: vec![0.2; 5],
        batch_size: 4,
    };
    for which in 0..2 {
        let eval = |x: &[f64], grad: bool| {
            let mut t = Tape::new();
            let lv = t.leaf(Tensor::new(vec![4, 5], x.to_vec()).unwrap().with_grad(grad));
            let p = t.softmax(lv).unwrap();
            let loss = if which == 0 {
                entropy_loss(&mut t, p, 1e-8).unwrap()
            } else {
                load_balance_loss(&mut t, p, &stats).unwrap()
            };
            let v = t.value(loss).item();
            let g = grad.then(|| {
                t.backward(loss).unwrap();
                t.grad(lv).unwrap().to_vec()
            });
            (v, g)
        };
        let analytic = eval(logits.data(), true).1.unwrap();
        let numeric = common::finite_diff(logits.data(), 1e-5, |x| eval(x, false).0);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(common::rel_err(*a, *n) <= 1e-4);
        }
    }
}

#[test]
fn batch_stats_examples() {
    let s = batch_stats(&[decision(&[0.9, 0.1]), decision(&[0.8, 0.2])], 1, false).unwrap();
    assert_eq!(s.dispatch_fraction, vec![1.0, 0.0]);
    assert!((s.mean_probability[0] - 0.85).abs() < 1e-12);
    assert!((s.mean_probability[1] - 0.15).abs() < 1e-12);

    let u = batch_stats(&[decision(&[0.25; 4]), decision(&[0.25; 4])], 2, false).unwrap();
    assert_eq!(u.dispatch_fraction, vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(u.mean_probability, vec![0.25; 4]);

    let one = batch_stats(&[decision(&[0.0, 0.0, 1.0])], 1, false).unwrap();
    assert_eq!(one.dispatch_fraction, vec![0.0, 0.0, 1.0]);
    assert_eq!(one.mean_probability, vec![0.0, 0.0, 1.0]);

    assert!(matches!(
        batch_stats(&[], 2, false),
        Err(Error::Contract(_))
    ));
}

#[test]
fn count_all_selected_spreads_dispatch_over_top_k() {
    let s = batch_stats(&[decision(&[0.6, 0.3, 0.1])], 2, true).unwrap();
    assert_eq!(s.dispatch_fraction, vec![0.5, 0.5, 0.0]);
}

fn loss_on(probs: &[Vec<f64>], f: &[f64], cfg: &MoeConfig) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let p = t.constant(Tensor::from_rows(probs));
    let stats = BatchGateStats {
        dispatch_fraction: f.to_vec(),
        mean_probability: vec![],
        batch_size: probs.len(),
    };
    let aux = auxiliary_loss(&mut t, p, &stats, cfg).unwrap();
    (aux.l_load, aux.l_entropy, t.value(aux.total).item())
}

#[test]
fn closed_form_losses() {
    let n = 16;
    let cfg = MoeConfig::default();
    let uniform = vec![vec![1.0 / n as f64; n]; 4];
    // symmetric tie-free routing: one sample per expert would give f = 1/N
    let (l, e, total) = loss_on(&uniform, &vec![1.0 / n as f64; n], &cfg);
    assert!((l - 1.0).abs() < 1e-9);
    assert!((e - (n as f64).ln()).abs() < 1e-6);
    assert!((total - (0.1 + 0.01 * 16f64.ln())).abs() < 1e-8);
    assert!((total - 0.12773).abs() < 1e-5);

    let mut onehot = vec![0.0; n];
    onehot[3] = 1.0;
    let (l, e, _) = loss_on(&[onehot.clone(), onehot.clone()], &onehot, &cfg);
    assert!((l - n as f64).abs() < 1e-9);
    assert!(e.abs() <= 1e-6);

    let (l, _, _) = loss_on(&[vec![0.9, 0.1], vec![0.8, 0.2]], &[1.0, 0.0], &cfg);
    assert!((l - 1.7).abs() < 1e-12);
    let (_, e, _) = loss_on(&[vec![0.5, 0.5]], &[1.0, 0.0], &cfg);
    assert!((e - 2f64.ln()).abs() < 1e-7);

    let off = MoeConfig {
        lambda_load: 0.0,
        beta_entropy: 0.0,
        ..cfg.clone()
    };
    assert_eq!(loss_on(&uniform, &[1.0 / 16.0; 16], &off).2, 0.0);
    let l_only = MoeConfig {
        beta_entropy: 0.0,
        ..cfg
    };
    let (l, _, total) = loss_on(&uniform, &[1.0 / 16.0; 16], &l_only);
    assert_eq!(total, 0.1 * l);
}

#[test]
fn config_validation() {
    assert!(small(4, 5).validate().is_err());
    assert!(small(4, 0).validate().is_err());
    let mut c = small(4, 2);
    c.eps_stability = 0.0;
    assert!(c.validate().is_err());
    c = small(4, 2);
    c.lambda_load = -1.0;
    assert!(c.validate().is_err());
    assert!(MoeConfig::default().validate().is_ok());
}

fn prob_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..6, n).prop_map(|v| {
        let w: Vec<f64> = v.iter().map(|&x| x as f64 + 0.5).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn top_k_matches_brute_force_with_ties(p in prob_vector(10), k in 1usize..=10) {
        prop_assert_eq!(top_k(&p, k), common::brute_top_k(&p, k));
    }

    #[test]
    fn entropy_stays_in_bounds(rows in prop::collection::vec(prob_vector(8), 1..6)) {
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_rows(&rows));
        let e = entropy_loss(&mut t, p, 1e-8).unwrap();
        let v = t.value(e).item();
        let eps = 1e-8f64;
        prop_assert!(v >= -1e-12);
        prop_assert!(v <= 8f64.ln() + 8.0 * eps * eps.ln().abs() + 1e-12);
    }

    #[test]
    fn literal_weights_sum_below_one(seed in 0u64..1000, k in 1usize..=6) {
        let (store, l) = layer(small(6, k), seed);
        let z = random_batch(3, 6, seed ^ 77, 1.0);
        let mut g = Graph::inference(&store);
        let zv = g.tape.constant(z);
        let out = l.route(&mut g, zv, None).unwrap();
        for d in &out.decisions {
            let s: f64 = d.combine_weights.iter().sum();
            if k == 6 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(s < 1.0);
            }
            let ps: f64 = d.probabilities.iter().sum();
            prop_assert!((ps - 1.0).abs() < 1e-10);
        }
        let stats = batch_stats(&out.decisions, k, false).unwrap();
        let fs: f64 = stats.dispatch_fraction.iter().sum();
        prop_assert!((fs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_loss_within_bounds_for_argmax_consistent_stats(
        rows in prop::collection::vec(prob_vector(6), 1..8)
    ) {
        let decisions: Vec<GateDecision> = rows.iter().map(|r| decision(r)).collect();
        let stats = batch_stats(&decisions, 1, false).unwrap();
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_rows(&rows));
        let l = load_balance_loss(&mut t, p, &stats).unwrap();
        let v = t.value(l).item();
        prop_assert!(v <= 6.0 + 1e-12);
        // rearrangement lower bound: largest dispatch fractions paired with smallest P
        let mut f = stats.dispatch_fraction.clone();
        let mut pm = stats.mean_probability.clone();
        f.sort_by(|a, b| a.total_cmp(b));
        pm.sort_by(|a, b| b.total_cmp(a));
        let lower: f64 = 6.0 * f.iter().zip(&pm).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!(v >= lower - 1e-12);
    }
}

#[test]
fn random_inputs_stay_finite() {
    let (store, l) = layer(small(8, 2), 1);
    let mut rng = seeding::rng(2);
    for _ in 0..20 {
        let scale = rng.random_range(0.1..50.0);
        let z = random_batch(3, 6, rng.random(), scale);
        let mut g = Graph::inference(&store);
        let zv = g.tape.constant(z);
        let out = l.route(&mut g, zv, None).unwrap();
        assert!(g
            .tape
            .value(out.output)
            .data()
            .iter()
            .all(|v| v.is_finite()));
    }
}
