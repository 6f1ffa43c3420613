//! Runs an experiment grid and prints mean CTR per method and training size.
//!
//! Usage: cargo run --release --example grid [spec.json]

use crmkit_core::harness::{run_experiment, summarize, ExperimentSpec};

fn main() {
    let spec: ExperimentSpec = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap(),
        None => ExperimentSpec {
            eval_users: 10_000,
            ..ExperimentSpec::default()
        },
    };
    let started = std::time::Instant::now();
    let result = run_experiment(&spec).unwrap();
    for (arm, users, ctr, lo, hi) in summarize(&result.rows) {
        println!("{arm:>15} {users:>6} {ctr:.5} [{lo:.5}, {hi:.5}]");
    }
    for f in &result.failures {
        println!(
            "failed: {} {} {}: {}",
            f.method, f.train_users, f.seed, f.message
        );
    }
    for f in &result.not_converged {
        println!(
            "not converged: {} {} {}: {}",
            f.method, f.train_users, f.seed, f.message
        );
    }
    for r in &result.rows {
        println!("row {} {} {} {:?}", r.method, r.train_users, r.seed, r.ctr);
    }
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
}
