use crmkit_core::harness::{run_experiment, Arm, ExperimentSpec};
use crmkit_core::policy::{PopularityPolicy, UniformPolicy};
use crmkit_core::sim::{Actor, Environment, SimConfig};

fn env() -> Environment {
    Environment::new(SimConfig::default()).unwrap()
}

#[test]
fn five_thousand_users_give_four_hundred_thousand_events() {
    let log = env().generate_logs(5000, &PopularityPolicy::default(), 1);
    assert_eq!(log.bandit_count(), 400_000);
    assert_eq!(log.num_users(), 5000);
}

#[test]
fn different_seeds_give_different_embeddings() {
    let a = env();
    let b = Environment::new(SimConfig {
        seed: 1,
        ..SimConfig::default()
    })
    .unwrap();
    assert_ne!(a.organic_embeddings(), b.organic_embeddings());
    assert_ne!(a.click_embeddings(), b.click_embeddings());
}

#[test]
fn ab_impressions_follow_fixed_slot_count() {
    let r = env()
        .ab_test(Actor::Policy(&UniformPolicy::new(10)), 30_000, 5)
        .unwrap();
    assert_eq!(r.impressions, 2_400_000);
}

#[test]
fn ab_interval_covers_expected_ctr() {
    let env = env();
    let logging = PopularityPolicy::default();
    let covered = (0..100u64)
        .filter(|&seed| {
            let ab = env
                .ab_test(Actor::Policy(&logging), 300, 1000 + seed)
                .unwrap();
            let truth = env
                .true_ctr(Actor::Policy(&logging), 300, 1000 + seed)
                .unwrap();
            ab.ci_low <= truth && truth <= ab.ci_high
        })
        .count();
    assert!(covered >= 90, "covered {covered}/100");
}

#[test]
fn oracle_beats_uniform_on_paired_users() {
    let env = env();
    let uniform = UniformPolicy::new(10);
    for seed in 0..3 {
        let o = env.ab_test(Actor::Oracle, 2000, seed).unwrap();
        let u = env.ab_test(Actor::Policy(&uniform), 2000, seed).unwrap();
        assert!(o.ctr >= u.ctr);
    }
}

#[test]
fn single_cell_logging_row_tracks_true_ctr() {
    let spec = ExperimentSpec {
        user_counts: vec![100],
        methods: vec![Arm::Logging],
        seeds: vec![0],
        eval_users: 2000,
        ..ExperimentSpec::default()
    };
    let result = run_experiment(&spec).unwrap();
    assert_eq!(result.rows.len(), 1);
    let row = &result.rows[0];
    let (_, eval_seed) = crmkit_core::harness::cell_seeds(0);
    let truth = env()
        .true_ctr(Actor::Policy(&PopularityPolicy::default()), 2000, eval_seed)
        .unwrap();
    assert!(row.ci_low.unwrap() <= truth && truth <= row.ci_high.unwrap());
}

#[test]
fn oracle_dominates_uniform_in_every_cell() {
    let spec = ExperimentSpec {
        user_counts: vec![50, 100],
        methods: vec![Arm::Uniform, Arm::Oracle],
        seeds: vec![0, 1, 2],
        eval_users: 1000,
        ..ExperimentSpec::default()
    };
    let rows = run_experiment(&spec).unwrap().rows;
    for o in rows.iter().filter(|r| r.method == Arm::Oracle) {
        let u = rows
            .iter()
            .find(|r| {
                r.method == Arm::Uniform && r.train_users == o.train_users && r.seed == o.seed
            })
            .unwrap();
        assert!(o.ctr.unwrap() >= u.ctr.unwrap());
    }
}
