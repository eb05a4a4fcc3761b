use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ciss::metrics::label_from_probs;
use ciss::model::{ModelConfig, ModelState};
use ciss::protocol::{init_step, run_scenario, train_step, PreviousModel, TrainConfig};
use ciss::report::{self, RunSummary};
use ciss::synthdata::{build_step, generate, DataParams, SamplePools, ScenarioPlan, Setting};
use ciss::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_pools(seed: u64) -> SamplePools {
    generate(&DataParams {
        seed,
        height: 16,
        width: 16,
        n_train: 48,
        n_val: 12,
        ..DataParams::default()
    })
    .unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: vec![3, 6, 6],
    }
}

fn fingerprint(state: &ModelState) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in state.params() {
        name.hash(&mut h);
        t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

#[test]
fn plan_4_1_runs_three_steps_and_grows_the_bank() {
    let plan = ScenarioPlan::parse("4-1", 6, Setting::Overlapped).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let r = run_scenario(&plan, &small_pools(1), 6, &small_model(), &cfg).unwrap();
    assert_eq!(r.steps.len(), 3);
    assert_eq!(r.steps.last().unwrap().state.bank.classes(), &[1, 2, 3, 4, 5, 6]);
    assert_eq!(r.steps.last().unwrap().state.step, 3);
    assert!(r.steps[0].start_false_activation.is_none());
    assert!(r.steps[1..].iter().all(|s| s.start_false_activation.is_some()));
    assert!(r.steps.iter().all(|s| s.trace.iter().all(|t| t.l_total.is_finite())));
    assert!(r.final_report().hiou.is_some());
}

#[test]
fn plan_3_1_runs_four_steps_disjoint() {
    let plan = ScenarioPlan::parse("3-1", 6, Setting::Disjoint).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let pools = generate(&DataParams {
        n_train: 120,
        height: 16,
        width: 16,
        n_val: 12,
        ..DataParams::default()
    })
    .unwrap();
    let r = run_scenario(&plan, &pools, 6, &small_model(), &cfg).unwrap();
    assert_eq!(r.steps.len(), 4);
    assert_eq!(r.steps[3].state.bank.len(), 6);
}

#[test]
fn joint_reference_is_a_single_step() {
    let plan = ScenarioPlan::joint(6).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let r = run_scenario(&plan, &small_pools(2), 6, &small_model(), &cfg).unwrap();
    assert_eq!(r.steps.len(), 1);
    assert_eq!(r.steps[0].state.bank.len(), 6);
    assert!(r.final_report().miou_n.is_none());
}

#[test]
fn epoch_mean_loss_decreases_over_first_epochs() {
    // default synthetic task, seed 1, first step
    let pools = generate(&DataParams::default()).unwrap();
    let plan = ScenarioPlan::parse("4-1", 6, Setting::Overlapped).unwrap();
    let data = build_step(&pools.train, &plan, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let state = ModelState::init_seeded(&ModelConfig::default(), &[1, 2, 3, 4], 1).unwrap();
    let out = train_step(state, &data, &cfg, None, &[]).unwrap();
    let means: Vec<f64> = (0..3)
        .map(|e| {
            let rows: Vec<f64> = out.trace.iter().filter(|r| r.epoch == e).map(|r| r.l_total).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        })
        .collect();
    assert!(means.iter().all(|m| m.is_finite()));
    for w in means.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "epoch means {means:?}");
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let plan = ScenarioPlan::parse("2-1", 3, Setting::Overlapped).unwrap();
    let pools = generate(&DataParams {
        num_classes: 3,
        height: 16,
        width: 16,
        n_train: 30,
        n_val: 6,
        ..DataParams::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = run_scenario(&plan, &pools, 3, &small_model(), &cfg).unwrap();
    let b = run_scenario(&plan, &pools, 3, &small_model(), &cfg).unwrap();
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(fingerprint(&x.state), fingerprint(&y.state));
    }
    let other = TrainConfig { seed: 2, ..cfg };
    let c = run_scenario(&plan, &pools, 3, &small_model(), &other).unwrap();
    assert_ne!(fingerprint(&a.steps[0].state), fingerprint(&c.steps[0].state));
}

#[test]
fn frozen_previous_model_is_untouched() {
    let plan = ScenarioPlan::parse("4-1", 6, Setting::Overlapped).unwrap();
    let pools = small_pools(3);
    let prev = ModelState::init_seeded(&small_model(), &[1, 2, 3, 4], 9).unwrap();
    let before = fingerprint(&prev);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let next = init_step(&prev, &[5], true, &mut rng).unwrap();
    let data = build_step(&pools.train, &plan, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let p = PreviousModel {
        model: &prev,
        old_classes: vec![1, 2, 3, 4],
    };
    let out = train_step(next, &data, &cfg, Some(&p), &pools.val[..2]).unwrap();
    assert_eq!(fingerprint(&prev), before);
    assert_ne!(fingerprint(&out.state), before);
}

#[test]
fn two_novel_classes_share_their_initialisation() {
    let prev = ModelState::init_seeded(&small_model(), &[1, 2], 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let next = init_step(&prev, &[3, 4], true, &mut rng).unwrap();
    assert_eq!(next.bank.entry(3).unwrap(), next.bank.entry(4).unwrap());
}

#[test]
fn threshold_rule_examples() {
    assert_eq!(label_from_probs(&[0.3, 0.4], &[1, 2], 0.5), vec![0]);
    assert_eq!(label_from_probs(&[0.3, 0.7], &[1, 2], 0.5), vec![2]);
    assert_eq!(label_from_probs(&[0.6, 0.6], &[1, 2], 0.5), vec![1]);
}

#[test]
fn diverging_training_aborts_naming_a_term() {
    let plan = ScenarioPlan::parse("4-1", 6, Setting::Overlapped).unwrap();
    let pools = small_pools(5);
    let data = build_step(&pools.train, &plan, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        lr_initial: 1e300,
        ..TrainConfig::default()
    };
    let state = ModelState::init_seeded(&small_model(), &[1, 2, 3, 4], 1).unwrap();
    match train_step(state, &data, &cfg, None, &[]) {
        Err(Error::NonFiniteLoss { term, step, iter }) => {
            assert_eq!(step, 1);
            assert!(iter >= 1);
            assert!(!term.is_empty());
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn run_artefacts_and_checkpoints_round_trip() {
    let plan = ScenarioPlan::parse("2-1", 3, Setting::Overlapped).unwrap();
    let pools = generate(&DataParams {
        num_classes: 3,
        height: 16,
        width: 16,
        n_train: 24,
        n_val: 6,
        ..DataParams::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let r = run_scenario(&plan, &pools, 3, &small_model(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = RunSummary {
        name: "t".into(),
        scenario: "2-1".into(),
        setting: "overlapped".into(),
        seed: 1,
        num_classes: 3,
        steps: Vec::new(),
        final_metrics: r.final_report().clone(),
        config: serde_json::json!({}),
    };
    report::write_run(dir.path(), &r, &summary, true).unwrap();
    let loaded = ModelState::load(&dir.path().join("step_2")).unwrap();
    assert_eq!(loaded, r.steps[1].state);
    assert_eq!(RunSummary::load(&dir.path().join(report::SUMMARY_FILE)).unwrap(), summary);
    let trace = std::fs::read_to_string(dir.path().join(report::TRACE_FILE)).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "step,epoch,iter,lr,L_mbce,L_kd,L_dkd,L_ac,L_total"
    );
    assert_eq!(trace.lines().count(), 1 + r.steps.iter().map(|s| s.trace.len()).sum::<usize>());
}
