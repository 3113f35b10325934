use modp::blockworld::{
    observe, reset, scripted_expert, step, DisturbanceSpec, StageKind, StageLabel, TaskSpec,
};
use modp::moe::{GateDecision, MoeConfig};
use modp::policy::{PolicyConfig, PolicyNets};
use modp::steer::{
    analyze, apply_override, plan_stub, timeline_csv, ExpertStageMap, OverrideDirective,
    OverrideMode, OverrideRunner,
};
use modp::trainer::{evaluate, Condition, PolicyController, RolloutRecord, StepTelemetry};
use modp::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn task() -> TaskSpec {
    TaskSpec::default()
}

fn all_stages(n: usize) -> Vec<StageLabel> {
    StageLabel::all(n)
        .into_iter()
        .filter(|l| *l != StageLabel::Done)
        .collect()
}

/// Map sending stage kind `k` of object `o` to expert `4·o + k`, each seen
/// 20 times.
fn diagonal_map() -> ExpertStageMap {
    let stages = all_stages(2);
    let pairs = stages
        .iter()
        .flat_map(|l| std::iter::repeat_n((l.code(), l.code() as usize), 20));
    ExpertStageMap::from_pairs(pairs, 16, &stages).unwrap()
}

fn tiny_nets(num_experts: usize) -> PolicyNets {
    let mut config = PolicyConfig {
        encoder_hidden: 16,
        denoiser_hidden: 24,
        moe: MoeConfig {
            num_experts,
            feature_dim: 8,
            expert_hidden_dim: 8,
            ..MoeConfig::default()
        },
        ..PolicyConfig::default()
    };
    config.schedule.num_steps = 8;
    PolicyNets::new(config, 2).unwrap()
}

#[test]
fn perfect_decomposition_has_purity_one() {
    let map = diagonal_map();
    assert_eq!(map.purity, 1.0);
    for l in all_stages(2) {
        assert_eq!(map.expert_for(l), Some(l.code() as usize));
    }
    assert!(map.unobserved.is_empty() && map.sparse.is_empty());
}

#[test]
fn uniform_random_experts_have_low_purity() {
    let stages = all_stages(2);
    assert_eq!(stages.len(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(u8, usize)> = (0..10_000)
        .map(|_| {
            let s = stages[rng.random_range(0..8)].code();
            (s, rng.random_range(0..16))
        })
        .collect();
    let map = ExpertStageMap::from_pairs(pairs, 16, &stages).unwrap();
    assert!(map.purity <= 0.15, "purity {}", map.purity);
    assert!(map.purity >= 1.0 / 16.0);
}

#[test]
fn rare_and_missing_stages_are_flagged() {
    let stages = all_stages(2);
    let mut pairs = vec![(StageLabel::Approach(0).code(), 3); 10];
    pairs.extend(vec![(StageLabel::Grasp(0).code(), 4); 9]);
    let map = ExpertStageMap::from_pairs(pairs, 8, &stages).unwrap();
    assert_eq!(map.expert_for(StageLabel::Approach(0)), Some(3));
    assert_eq!(map.expert_for(StageLabel::Grasp(0)), None);
    assert_eq!(map.sparse, vec![StageLabel::Grasp(0).code()]);
    assert_eq!(map.unobserved.len(), 6);
    assert!(matches!(
        ExpertStageMap::from_pairs(vec![(0, 8)], 8, &stages),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ExpertStageMap::from_pairs(Vec::new(), 8, &stages),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #[test]
    fn purity_is_label_invariant_and_bounded(
        pairs in prop::collection::vec((0u8..8, 0usize..6), 1..200),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let stages = all_stages(2);
        let a = ExpertStageMap::from_pairs(pairs.clone(), 6, &stages).unwrap();
        let relabeled = pairs.iter().map(|&(s, e)| (s, perm[e]));
        let b = ExpertStageMap::from_pairs(relabeled, 6, &stages).unwrap();
        prop_assert!((a.purity - b.purity).abs() < 1e-15);
        prop_assert!(a.purity > 0.0 && a.purity <= 1.0);
    }
}

fn decision(probs: Vec<f64>) -> GateDecision {
    GateDecision {
        selected: vec![0, 1],
        combine_weights: vec![probs[0], probs[1]],
        probabilities: probs,
        overridden: false,
    }
}

#[test]
fn override_none_is_identity_and_force_is_a_unit_vector() {
    let d = decision(vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05]);
    assert_eq!(apply_override(&d, None).unwrap(), d);
    let forced = apply_override(&d, Some(5)).unwrap();
    assert_eq!(forced.probabilities, d.probabilities);
    assert!(forced.overridden);
    let dense = forced.weight_vector();
    let mut e5 = vec![0.0; 6];
    e5[5] = 1.0;
    assert_eq!(dense, e5);
    assert!(matches!(
        apply_override(&d, Some(6)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn router_probabilities_ignore_overrides() {
    let nets = tiny_nets(8);
    let s = reset(&task(), 3).unwrap();
    let window = vec![observe(&s); nets.config.chunking.obs_horizon];
    let free = nets.sample_action_chunk(&window, 11, None).unwrap();
    let g_free = free.gate.unwrap();
    for j in [0, 3, 7] {
        let forced = nets.sample_action_chunk(&window, 11, Some(j)).unwrap();
        let g = forced.gate.unwrap();
        assert_eq!(g.probabilities, g_free.probabilities);
        assert_eq!(g.selected, vec![j]);
        assert_eq!(g.combine_weights, vec![1.0]);
        assert!(g.overridden);
    }
    assert!(!g_free.overridden);
    assert_eq!(g_free.selected.len(), nets.config.moe.top_k);
}

#[test]
fn forced_expert_shows_in_every_gated_step() {
    let nets = tiny_nets(8);
    let factory = |_: usize| -> Box<dyn modp::trainer::OverrideSource> {
        Box::new(OverrideRunner::new(OverrideDirective::force(3)))
    };
    let c = PolicyController::with_overrides(&nets, &factory);
    let report = evaluate(&c, &task(), Condition::Nominal, 2, &[0]).unwrap();
    let gates: Vec<&GateDecision> = report
        .episodes
        .iter()
        .flat_map(|r| &r.telemetry)
        .filter_map(|s| s.gate.as_ref())
        .collect();
    assert_eq!(gates.len(), report.control_steps);
    assert!(gates.iter().all(|g| g.selected == vec![3] && g.overridden));
    assert_eq!(report.expert_usage[3], report.control_steps);
}

#[test]
fn schedule_forces_each_stage_expert_in_order() {
    // The scripted expert is told to do B first; the runner is queried at
    // every step and must walk B's four stages, then A's.
    let map = diagonal_map();
    let mut t = task();
    let directive = plan_stub(&[1, 0], &map, None, &t).unwrap();
    assert_eq!(directive.expert_sequence(), vec![4, 5, 6, 7, 0, 1, 2, 3]);
    t.subtask_order = vec![1, 0];
    let mut runner = OverrideRunner::new(directive.clone());
    let mut s = reset(&t, 5).unwrap();
    let mut cursor_moves = Vec::new();
    while !s.done {
        let before = runner.cursor();
        let forced = runner.next_forced(&s, &t);
        if runner.cursor() != before {
            cursor_moves.push(s.step_index);
            assert!(s.is_placed(1, &t), "entry ended before its predicate held");
        }
        if s.all_placed(&t) {
            assert_eq!(forced, None);
        } else {
            assert!(forced.is_some());
        }
        let a = scripted_expert(&s, &t, 0.0, 0);
        s = step(&s, a, &t, &DisturbanceSpec::none()).unwrap().0;
    }
    assert!(s.success);
    assert_eq!(cursor_moves.len(), 1);
    let executed: Vec<usize> = runner.executed().iter().map(|f| f.expert).collect();
    assert_eq!(executed, directive.expert_sequence());
    let entries: Vec<usize> = runner.executed().iter().map(|f| f.entry).collect();
    assert_eq!(entries, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    let kinds: Vec<StageKind> = runner.executed().iter().map(|f| f.stage).collect();
    assert_eq!(&kinds[..4], &StageKind::ALL);
}

#[test]
fn plan_follows_goal_order_and_skips_finished_work() {
    let map = diagonal_map();
    let t = task();
    let forward = plan_stub(&[0, 1], &map, None, &t).unwrap();
    let nominal: Vec<usize> = all_stages(2)
        .iter()
        .map(|l| map.expert_for(*l).unwrap())
        .collect();
    assert_eq!(forward.expert_sequence(), nominal);
    assert_eq!(forward.mode, OverrideMode::Schedule);

    let reversed = plan_stub(&[1, 0], &map, None, &t).unwrap();
    let b = map.subtask_experts(1).unwrap();
    let a = map.subtask_experts(0).unwrap();
    let concat: Vec<usize> = b.iter().chain(&a).map(|&(_, e)| e).collect();
    assert_eq!(reversed.expert_sequence(), concat);

    assert_eq!(
        plan_stub(&[], &map, None, &t).unwrap(),
        OverrideDirective::none()
    );

    let mut s = reset(&t, 0).unwrap();
    s.object_pos[1] = s.zone_centers[1];
    let partial = plan_stub(&[1, 0], &map, Some(&s), &t).unwrap();
    assert_eq!(partial.schedule.len(), 1);
    assert_eq!(partial.schedule[0].subtask, 0);
}

#[test]
fn uncalibrated_subtasks_cannot_be_planned() {
    let stages = all_stages(2);
    let only_a: Vec<(u8, usize)> = stages
        .iter()
        .filter(|l| {
            matches!(
                l,
                StageLabel::Approach(0)
                    | StageLabel::Grasp(0)
                    | StageLabel::Transport(0)
                    | StageLabel::Release(0)
            )
        })
        .flat_map(|l| std::iter::repeat_n((l.code(), 1), 12))
        .collect();
    let map = ExpertStageMap::from_pairs(only_a, 4, &stages).unwrap();
    assert!(plan_stub(&[0], &map, None, &task()).is_ok());
    assert!(matches!(
        plan_stub(&[1, 0], &map, None, &task()),
        Err(Error::Planning(_))
    ));
    assert!(matches!(
        plan_stub(&[2], &map, None, &task()),
        Err(Error::Planning(_))
    ));
}

#[test]
fn timeline_export_matches_the_report() {
    let nets = tiny_nets(4);
    let t = task();
    let report = evaluate(
        &PolicyController::new(&nets),
        &t,
        Condition::Nominal,
        3,
        &[0],
    )
    .unwrap();
    let a = analyze(&report, &t).unwrap();
    let mut lines = a.csv.lines();
    assert_eq!(lines.next().unwrap(), "t,stage,expert,entropy,w1,w2");
    assert_eq!(lines.count(), report.control_steps);
    assert!(a.csv.ends_with('\n') && !a.csv.contains('\r'));
    assert_eq!(a.summary.usage_histogram, report.expert_usage);
    assert_eq!(a.summary.control_steps, report.control_steps);
    assert_eq!(a.summary.collapse_count, report.distinct_experts);
    let mean = a.summary.mean_entropy.unwrap();
    assert!((mean - report.mean_gate_entropy.unwrap()).abs() < 1e-12);
    let first = a.csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields.len(), 6);
    let g = report.episodes[0].telemetry[0].gate.as_ref().unwrap();
    assert_eq!(fields[2].parse::<usize>().unwrap(), g.selected[0]);
    for (i, w) in fields[4..].iter().enumerate() {
        assert_eq!(w.parse::<f64>().unwrap(), g.combine_weights[i]);
    }
}

#[test]
fn one_hot_gates_export_zero_entropy() {
    let telemetry = (0..30)
        .map(|t| {
            let mut probs = vec![0.0; 16];
            probs[t % 16] = 1.0;
            StepTelemetry {
                t,
                stage: (t % 8) as u8,
                gate: Some(GateDecision {
                    probabilities: probs,
                    selected: vec![t % 16, (t + 1) % 16],
                    combine_weights: vec![1.0, 0.0],
                    overridden: false,
                }),
            }
        })
        .collect();
    let record = RolloutRecord {
        seed: 0,
        rollout: 0,
        env_seed: 0,
        success: false,
        length: 30,
        disturbances_fired: 0,
        placed_order: Vec::new(),
        override_fallback: false,
        telemetry,
    };
    let csv = timeline_csv(&[record]);
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let entropy: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(entropy.abs() <= 1e-6);
        rows += 1;
    }
    assert_eq!(rows, 30);
}
