use proptest::prelude::*;

use swarmcbf_core::autodiff::{Adam, AdamConfig, Gradients, Tape};
use swarmcbf_core::comms::{perfect_local_data, RobotId};
use swarmcbf_core::config::{Config, ScenarioConfig};
use swarmcbf_core::dynamics::{ControlInput, DynamicsKind, InputBounds, RobotState, StateDiff};
use swarmcbf_core::eval::run_episode;
use swarmcbf_core::models::{Checkpoint, Label, NetConfig, ParamGroup, SafetyLabeler};
use swarmcbf_core::rng::SimRng;
use swarmcbf_core::sim::{decide, ControlParams, Mode, Placement, World};
use swarmcbf_core::training::{
    batch_loss, batch_pred_loss, run_training, sample_loss, LossWeights, Sample,
};
use swarmcbf_core::ModelSet;

const SI: DynamicsKind = DynamicsKind::SingleIntegrator;

fn small_net() -> NetConfig {
    NetConfig {
        phi_hidden: vec![16, 16],
        message_dim: 8,
        attention_hidden: vec![8],
        gamma_hidden: vec![16],
        feature_dim: 8,
        head_hidden: vec![16, 8],
        embed_dim: 8,
        rnn_hidden: 12,
        ..NetConfig::default()
    }
}

fn rollout_samples(scenario: &ScenarioConfig, seed: u64, episodes: u64, every: usize) -> Vec<Sample> {
    let labeler = SafetyLabeler::new(scenario.d_coll, scenario.d_safe).unwrap();
    let mut out = Vec::new();
    for ep in 0..episodes {
        let mut world = World::random(scenario, seed, ep).unwrap();
        for k in 0..scenario.max_steps as usize {
            let data = world.observe().unwrap();
            let u = world.nominal().unwrap();
            if k % every == 0 {
                out.push(
                    Sample::new(SI, world.states.clone(), u.clone(), data, scenario.perfect_info, &labeler, scenario.comm_radius)
                        .unwrap(),
                );
            }
            world.apply(&u).unwrap();
            if world.all_at_goal() {
                break;
            }
        }
    }
    out
}

fn diffs() -> impl Strategy<Value = Vec<(RobotId, StateDiff<f64>)>> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..9).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(j, (x, y))| (j, StateDiff::SingleIntegrator { dp: [x, y] }))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn barrier_is_strictly_bounded(w in diffs(), seed in 0u64..1000) {
        let models = ModelSet::new(SI, &NetConfig::default(), 5, 0.03, seed);
        let h = models.cbf_value(&w).unwrap();
        prop_assert!(h.abs() < 1.0);
    }

    #[test]
    fn collision_flag_matches_distance_trace(seed in 0u64..10_000, robots in 2usize..9) {
        let scenario = ScenarioConfig { robots, ..ScenarioConfig::default() };
        let r = run_episode(None, &scenario, Mode::NominalOnly, &ControlParams::default(), seed, 0, None).unwrap();
        prop_assert_eq!(r.collided, r.min_distance() < scenario.d_coll);
    }
}

#[test]
fn losses_are_nonnegative() {
    let scenario = ScenarioConfig { robots: 6, c_del: 0.5, perfect_info: false, ..ScenarioConfig::default() };
    let samples = rollout_samples(&scenario, 4, 3, 7);
    let models = ModelSet::new(SI, &small_net(), 5, 0.03, 2);
    let w = LossWeights::from(&Config::default().train);
    let bounds = InputBounds::default();
    for s in &samples {
        let mut tape = Tape::new(&models.store);
        let l = sample_loss(&mut tape, &models, s, &w, &bounds, 0.03).unwrap();
        assert!(tape.scalar(l.cbf) >= 0.0 && tape.scalar(l.contr) >= 0.0);
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::new(&models.store);
    let (l, pairs) = batch_pred_loss::<SimRng>(&mut tape, &models, &batch, None).unwrap();
    assert!(pairs > 0);
    assert!(tape.scalar(l) > 0.0);
}

#[test]
fn gradients_reach_every_model() {
    let scenario = ScenarioConfig { robots: 6, c_del: 0.5, perfect_info: false, ..ScenarioConfig::default() };
    let mut samples = rollout_samples(&scenario, 5, 2, 5);
    // A colliding pair keeps the unsafe hinge active.
    let states = vec![
        RobotState::SingleIntegrator { p: [1.0, 1.0] },
        RobotState::SingleIntegrator { p: [1.05, 1.0] },
    ];
    let u = vec![ControlInput([0.4, 0.0]), ControlInput([-0.4, 0.0])];
    let data = perfect_local_data(&states, &u, 1.0).unwrap();
    let crash = Sample::new(SI, states, u, data, false, &SafetyLabeler::default(), 1.0).unwrap();
    assert_eq!(crash.labels, [Label::Unsafe; 2]);
    samples.push(crash);
    let batch: Vec<&Sample> = samples.iter().collect();
    let models = ModelSet::new(SI, &small_net(), 5, 0.03, 3);
    let w = LossWeights::from(&Config::default().train);
    let norm = |g: &Gradients<f64>, group: ParamGroup| {
        g.norm_sq(models.group_ids(group))
    };
    let mut tape = Tape::new(&models.store);
    let l = batch_loss(&mut tape, &models, &batch, &w, &InputBounds::default(), 0.03).unwrap();
    let g = tape.backward(l.total).unwrap().params;
    for prefix in ["cbf.", "ctrl."] {
        let n: f64 = g.norm_sq(models.store.ids_with_prefix(prefix));
        assert!(n > 0.0, "no gradient reaches {prefix}");
    }
    let mut tape = Tape::new(&models.store);
    let (l, _) = batch_pred_loss::<SimRng>(&mut tape, &models, &batch, None).unwrap();
    let g = tape.backward(l).unwrap().params;
    assert!(norm(&g, ParamGroup::Predictor) > 0.0);
    assert_eq!(norm(&g, ParamGroup::CbfController), 0.0);
}

#[test]
fn frozen_batch_can_be_overfit() {
    let scenario = ScenarioConfig { robots: 6, ..ScenarioConfig::default() };
    let samples = rollout_samples(&scenario, 6, 4, 9);
    let batch: Vec<&Sample> = samples.iter().take(32).collect();
    let mut models = ModelSet::new(SI, &small_net(), 5, 0.03, 4);
    let w = LossWeights::from(&Config::default().train);
    let bounds = InputBounds::default();
    let ids = models.group_ids(ParamGroup::CbfController);
    let mut adam = Adam::new(AdamConfig { lr: 3e-3, ..AdamConfig::default() }, &models.store);
    let loss = |models: &ModelSet| {
        let mut tape = Tape::new(&models.store);
        let l = batch_loss(&mut tape, models, &batch, &w, &bounds, 0.03).unwrap();
        tape.scalar(l.total)
    };
    let first = loss(&models);
    for _ in 0..500 {
        let g = {
            let mut tape = Tape::new(&models.store);
            let l = batch_loss(&mut tape, &models, &batch, &w, &bounds, 0.03).unwrap();
            tape.backward(l.total).unwrap().params
        };
        adam.step(&mut models.store, &g, &ids).unwrap();
    }
    let last = loss(&models);
    assert!(first > 0.0);
    assert!(last <= 0.1 * first, "loss went from {first} to {last}");
}

fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.net = small_net();
    cfg.scenario.robots = 4;
    cfg.train.batch_size = 8;
    cfg
}

#[test]
fn update_schedule_arithmetic() {
    let mut cfg = tiny_config();
    cfg.train.steps = 5120;
    cfg.train.delta_train = 512;
    let models = ModelSet::new(SI, &cfg.net, 5, 0.03, 0);
    let out = run_training(&cfg, models, 0, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(out.steps, 5120);
    assert_eq!(out.log.len(), 10);
    assert_eq!(out.descent_steps, 100);
    assert!(out.log.iter().all(|r| r.group == "cbf_ctrl"));
}

#[test]
fn alternating_events_touch_one_group_each() {
    let mut cfg = tiny_config();
    cfg.scenario.c_del = 0.5;
    cfg.scenario.perfect_info = false;
    cfg.train.steps = 8 * 64;
    cfg.train.delta_train = 64;
    cfg.train.n_desc = 2;
    cfg.train.alternation_period = 2;
    cfg.train.checkpoint_every = 1;
    let models = ModelSet::new(SI, &cfg.net, 5, 0.03, 1);
    let mut snapshots = vec![Checkpoint::from_models(&models, 0)];
    let out = run_training(&cfg, models, 1, &mut |m, _, step| {
        snapshots.push(Checkpoint::from_models(m, step));
        Ok(())
    })
    .unwrap();
    assert_eq!(out.log.len(), 8);
    let groups: Vec<&str> = out.log.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(groups, ["cbf_ctrl", "cbf_ctrl", "pred", "pred", "cbf_ctrl", "cbf_ctrl", "pred", "pred"]);
    for (k, row) in out.log.iter().enumerate() {
        let (before, after) = (&snapshots[k].params, &snapshots[k + 1].params);
        let changed = |prefix: &str| {
            before.iter().filter(|(n, _)| n.starts_with(prefix)).any(|(n, t)| after[n] != *t)
        };
        let trained_pred = row.group == "pred";
        assert_eq!(changed("pred."), trained_pred, "event {}", k + 1);
        assert_eq!(changed("cbf.") || changed("ctrl."), !trained_pred, "event {}", k + 1);
    }
}

#[test]
fn training_is_reproducible() {
    let mut cfg = tiny_config();
    cfg.train.steps = 600;
    cfg.train.delta_train = 100;
    cfg.train.n_desc = 2;
    let go = || {
        let models = ModelSet::new(SI, &cfg.net, 5, 0.03, 8);
        let out = run_training(&cfg, models, 8, &mut |_, _, _| Ok(())).unwrap();
        Checkpoint::from_models(&out.models, out.steps).to_json().unwrap()
    };
    assert_eq!(go(), go());
}

#[test]
fn analytic_filter_prevents_head_on_collision() {
    for offset in [0.0, 0.01, 0.05] {
        let scenario = ScenarioConfig { robots: 2, ..ScenarioConfig::default() };
        let placement = Placement {
            starts: vec![[1.0, 1.5], [2.0, 1.5 + offset]],
            goals: vec![[2.0, 1.5 + offset], [1.0, 1.5]],
        };
        let mut world = World::new(&scenario, placement, 0, 0);
        let ctl = ControlParams::default();
        for _ in 0..500 {
            let data = world.observe().unwrap();
            let d = decide(Mode::AnalyticBaseline, None, &world, &data, &ctl).unwrap();
            let u: Vec<_> = d.iter().map(|d| d.applied).collect();
            world.apply(&u).unwrap();
            assert!(world.min_pairwise_distance() >= scenario.d_coll, "offset {offset}");
        }
    }
}
