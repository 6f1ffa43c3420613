use std::path::Path;
use std::process::{Command, Output};

use crmkit_core::harness::{parse_results_csv, Arm, ExperimentSpec};
use crmkit_core::objectives::Method;
use serde_json::Value;

fn crmkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crmkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("crmkit runs")
}

fn json_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(text.lines().last().expect("one JSON line")).unwrap()
}

fn simulate(dir: &Path, users: &str, file: &str) -> Output {
    let out = crmkit(dir, &["simulate", "--users", users, "--out", file]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn simulate_reports_fixed_event_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = crmkit(
        dir.path(),
        &[
            "simulate",
            "--users",
            "5000",
            "--items",
            "10",
            "--out",
            "log.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let summary = json_line(&out);
    assert_eq!(summary["bandit_events"], 400_000);
    assert_eq!(summary["users"], 5000);
    assert!(summary["organic_events"].as_u64().unwrap() > 0);
}

#[test]
fn simulate_rejects_zero_users() {
    let dir = tempfile::tempdir().unwrap();
    let out = crmkit(
        dir.path(),
        &["simulate", "--users", "0", "--out", "log.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (file, seed) in [("a.jsonl", "4"), ("b.jsonl", "4"), ("c.jsonl", "5")] {
        let out = crmkit(
            d,
            &["--seed", seed, "simulate", "--users", "40", "--out", file],
        );
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn config_keys_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"n_itemz": 5}"#).unwrap();
    let out = crmkit(
        d,
        &[
            "--config", "bad.json", "simulate", "--users", "3", "--out", "l.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = crmkit(
        d,
        &[
            "--config",
            "missing.json",
            "simulate",
            "--users",
            "3",
            "--out",
            "l.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dual_at_zero_alpha_matches_cb() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "60", "log.jsonl");
    let a = crmkit(
        d,
        &[
            "train",
            "--log",
            "log.jsonl",
            "--method",
            "dual",
            "--alpha",
            "0",
            "--out",
            "dual.json",
        ],
    );
    let b = crmkit(
        d,
        &[
            "train",
            "--log",
            "log.jsonl",
            "--method",
            "cb",
            "--out",
            "cb.json",
        ],
    );
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(
        std::fs::read(d.join("dual.json")).unwrap(),
        std::fs::read(d.join("cb.json")).unwrap()
    );
}

#[test]
fn train_rejects_bad_method_and_tiny_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "5", "log.jsonl");
    let out = crmkit(
        d,
        &[
            "train",
            "--log",
            "log.jsonl",
            "--method",
            "bogus",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let one_event = concat!(
        r#"{"n_items":3,"format_version":1}"#,
        "\n",
        r#"{"type":"bandit","user_id":0,"t":0,"context":[0,0,0],"action":1,"propensity":0.5,"click":1}"#,
        "\n"
    );
    std::fs::write(d.join("one.jsonl"), one_event).unwrap();
    let out = crmkit(
        d,
        &[
            "train",
            "--log",
            "one.jsonl",
            "--method",
            "poem",
            "--lambda",
            "1",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = crmkit(
        d,
        &[
            "train",
            "--log",
            "absent.jsonl",
            "--method",
            "cb",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn likelihood_converges_on_simulated_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sim.json"),
        r#"{"click_scale": 1.5, "click_offset": -5.388363}"#,
    )
    .unwrap();
    let out = crmkit(
        d,
        &[
            "--config",
            "sim.json",
            "simulate",
            "--users",
            "300",
            "--out",
            "log.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let out = crmkit(
        d,
        &[
            "train",
            "--log",
            "log.jsonl",
            "--method",
            "likelihood",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json_line(&out);
    assert!(report["grad_norm"].as_f64().unwrap() <= 1e-6);
    assert_eq!(report["converged"], true);
    let policy: Value = serde_json::from_slice(&std::fs::read(d.join("p.json")).unwrap()).unwrap();
    assert_eq!(policy["kind"], "ctr_model");
}

#[test]
fn early_stop_is_flagged_but_policy_written() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "200", "log.jsonl");
    let out = crmkit(
        d,
        &[
            "train",
            "--log",
            "log.jsonl",
            "--method",
            "likelihood",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json_line(&out)["converged"], false);
    assert!(d.join("p.json").exists());
}

#[test]
fn evaluate_logging_policy_off_policy_and_ab() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let summary = json_line(&simulate(d, "100", "log.jsonl"));
    std::fs::write(
        d.join("logging.json"),
        r#"{"kind":"popularity","n_items":10}"#,
    )
    .unwrap();

    for estimator in ["ips", "snips"] {
        let out = crmkit(
            d,
            &[
                "evaluate",
                "--policy",
                "logging.json",
                "--off-policy",
                "--log",
                "log.jsonl",
                "--estimator",
                estimator,
            ],
        );
        assert_eq!(out.status.code(), Some(0));
        let report = json_line(&out);
        let gap = report["estimate"].as_f64().unwrap() - summary["empirical_ctr"].as_f64().unwrap();
        assert!(gap.abs() <= 1e-12, "{estimator}: {gap}");
        assert_eq!(report["effective_sample_size"].as_f64().unwrap(), 8000.0);
    }

    let out = crmkit(
        d,
        &[
            "evaluate",
            "--policy",
            "logging.json",
            "--off-policy",
            "--log",
            "log.jsonl",
            "--estimator",
            "dr",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = crmkit(
        d,
        &[
            "evaluate",
            "--policy",
            "logging.json",
            "--ab",
            "--users",
            "30000",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let report = json_line(&out);
    assert_eq!(report["impressions"], 2_400_000);
    let ctr = report["ctr"].as_f64().unwrap();
    assert!(
        report["ci_low"].as_f64().unwrap() <= ctr && ctr <= report["ci_high"].as_f64().unwrap()
    );

    std::fs::write(
        d.join("broken.json"),
        r#"{"kind":"linear_softmax","n_items":2}"#,
    )
    .unwrap();
    let out = crmkit(
        d,
        &[
            "evaluate",
            "--policy",
            "broken.json",
            "--ab",
            "--users",
            "10",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = ExperimentSpec {
        user_counts: vec![30, 60],
        methods: vec![Arm::Learned(Method::Likelihood), Arm::Logging, Arm::Oracle],
        seeds: vec![0, 1, 2],
        eval_users: 400,
        ..ExperimentSpec::default()
    };
    std::fs::write(d.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let out = crmkit(d, &["compare", "--spec", "spec.json", "--out", "res"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json_line(&out)["rows"], 18);

    let csv = std::fs::read(d.join("res/results.csv")).unwrap();
    let rows = parse_results_csv(csv.as_slice()).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 3);
    let svg = std::fs::read_to_string(d.join("res/results.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));

    let mean = |arm: Arm| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == arm)
            .filter_map(|r| r.ctr)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Arm::Oracle) > mean(Arm::Logging));

    let out = crmkit(d, &["compare", "--spec", "spec.json", "--out", "again"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(csv, std::fs::read(d.join("again/results.csv")).unwrap());
}

#[test]
fn compare_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"user_counts": [500, 100]}"#).unwrap();
    let out = crmkit(d, &["compare", "--spec", "spec.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_block_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = ExperimentSpec {
        user_counts: vec![30],
        methods: vec![Arm::Learned(Method::Dual)],
        seeds: vec![0],
        eval_users: 100,
        ..ExperimentSpec::default()
    };
    std::fs::write(d.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let out = crmkit(
        d,
        &[
            "sweep",
            "--spec",
            "spec.json",
            "--param",
            "alpha",
            "--values",
            "0,0.5,1",
            "--out",
            "sw",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("param,value,method"));
    assert!(lines[3].starts_with("alpha,1,dual"));
}
