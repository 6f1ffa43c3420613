//! Experiment grid: train every method on logs of increasing size, A/B-test
//! the learned policies in the simulator, and report CTR with 95% intervals.
//!
//! Within a `(train_users, seed)` cell every arm sees the same training log
//! and the same evaluation population, so differences between arms are
//! paired. Training populations are shared across user counts for a given
//! seed; smaller logs are prefixes of larger ones.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::objectives::{train, Method, ObjectiveConfig, TrainingSet};
use crate::optim::LbfgsConfig;
use crate::policy::{AnyPolicy, PopularityPolicy, UniformPolicy};
use crate::rng::derive_seed;
use crate::sim::{Actor, Environment, SimConfig, SimError};

const TRAIN_TAG: u64 = 1;
const EVAL_TAG: u64 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid interval request: {0}")]
    Interval(String),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot plot an empty result set")]
    NoRows,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Wilson score interval for a binomial proportion.
pub fn confidence_interval(
    clicks: u64,
    impressions: u64,
    level: f64,
) -> Result<(f64, f64), HarnessError> {
    if impressions == 0 {
        return Err(HarnessError::Interval(
            "impressions must be positive".into(),
        ));
    }
    if clicks > impressions {
        return Err(HarnessError::Interval(format!(
            "clicks {clicks} exceed impressions {impressions}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(HarnessError::Interval(format!(
            "level {level} outside (0, 1)"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let n = impressions as f64;
    let p = clicks as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if clicks == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let high = if clicks == impressions {
        1.0
    } else {
        (center + half).min(1.0)
    };
    Ok((low, high))
}

/// A method trained on the logs, or one of the reference policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Learned(Method),
    /// The popularity policy that produced the training logs.
    Logging,
    Uniform,
    /// Greedy on the simulator's true click model.
    Oracle,
}

impl Arm {
    pub fn all() -> Vec<Arm> {
        Method::ALL
            .into_iter()
            .map(Arm::Learned)
            .chain([Arm::Logging, Arm::Uniform, Arm::Oracle])
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Learned(m) => m.name(),
            Arm::Logging => "logging",
            Arm::Uniform => "uniform",
            Arm::Oracle => "oracle",
        }
    }
}

impl FromStr for Arm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logging" => Ok(Arm::Logging),
            "uniform" => Ok(Arm::Uniform),
            "oracle" => Ok(Arm::Oracle),
            other => other
                .parse::<Method>()
                .map(Arm::Learned)
                .map_err(|_| HarnessError::InvalidSpec(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Arm {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub alpha: f64,
    pub lambda: f64,
    pub clip_m: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 0.5,
            lambda: 1.0,
            clip_m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sim_config: SimConfig,
    pub user_counts: Vec<u64>,
    pub methods: Vec<Arm>,
    pub eval_users: u64,
    pub seeds: Vec<u64>,
    pub hyper: Hyper,
    pub optimizer: LbfgsConfig,
    /// Fill the `wall_time` column. Off by default because timings make the
    /// CSV non-reproducible.
    pub record_wall_time: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            sim_config: SimConfig::default(),
            user_counts: vec![100, 500, 1000, 2000, 5000],
            methods: Arm::all(),
            eval_users: 30_000,
            seeds: vec![0, 1, 2, 3, 4],
            hyper: Hyper::default(),
            optimizer: LbfgsConfig::default(),
            record_wall_time: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim_config.validate()?;
        if self.user_counts.is_empty() || self.user_counts.contains(&0) {
            return Err(HarnessError::InvalidSpec(
                "user_counts must be positive".into(),
            ));
        }
        if self.user_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::InvalidSpec(
                "user_counts must be strictly ascending".into(),
            ));
        }
        if self.eval_users == 0 {
            return Err(HarnessError::InvalidSpec(
                "eval_users must be at least 1".into(),
            ));
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::InvalidSpec(
                "methods and seeds must be non-empty".into(),
            ));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(HarnessError::InvalidSpec("duplicate method".into()));
        }
        let mut s = self.seeds.clone();
        s.sort();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(HarnessError::InvalidSpec("duplicate seed".into()));
        }
        self.objective_config(Method::Dual)
            .validate()
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    pub fn objective_config(&self, method: Method) -> ObjectiveConfig {
        ObjectiveConfig {
            method,
            alpha: self.hyper.alpha,
            lambda: self.hyper.lambda,
            clip_m: self.hyper.clip_m,
        }
    }
}

/// Population seeds of one grid cell.
pub fn cell_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, TRAIN_TAG), derive_seed(seed, EVAL_TAG))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Arm,
    pub train_users: u64,
    pub seed: u64,
    pub ctr: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub train_events: u64,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub method: Arm,
    pub train_users: u64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
    /// Learned arms whose optimizer stopped before the gradient tolerance.
    pub not_converged: Vec<CellFailure>,
}

fn run_arm(
    env: &Environment,
    spec: &ExperimentSpec,
    arm: Arm,
    data: &TrainingSet,
    eval_seed: u64,
) -> Result<(crate::sim::AbResult, Option<String>), String> {
    let n = env.n_items();
    let logging = PopularityPolicy::new(n, 1.0).expect("positive smoothing");
    let uniform = UniformPolicy::new(n);
    let mut warning = None;
    let learned: AnyPolicy;
    let actor = match arm {
        Arm::Logging => Actor::Policy(&logging),
        Arm::Uniform => Actor::Policy(&uniform),
        Arm::Oracle => Actor::Oracle,
        Arm::Learned(m) => {
            let out = train(data, &spec.objective_config(m), &spec.optimizer)
                .map_err(|e| e.to_string())?;
            if !out.converged() {
                warning = Some(format!(
                    "{:?} after {} iterations, gradient norm {:e}",
                    out.minimum.termination, out.minimum.iterations, out.minimum.grad_norm
                ));
            }
            learned = out.policy;
            Actor::Policy(&learned)
        }
    };
    let ab = env
        .ab_test(actor, spec.eval_users, eval_seed)
        .map_err(|e| e.to_string())?;
    Ok((ab, warning))
}

/// Runs the whole grid. Cells run in parallel; rows come back sorted by
/// `(method, train_users, seed)`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, HarnessError> {
    spec.validate()?;
    let env = Environment::new(spec.sim_config.clone())?;
    let logging = PopularityPolicy::new(env.n_items(), 1.0).expect("positive smoothing");
    let cells: Vec<(u64, u64)> = spec
        .user_counts
        .iter()
        .flat_map(|&u| spec.seeds.iter().map(move |&s| (u, s)))
        .collect();

    let per_cell: Vec<ExperimentResult> = cells
        .par_iter()
        .map(|&(train_users, seed)| {
            let (train_seed, eval_seed) = cell_seeds(seed);
            let log = env.generate_logs(train_users, &logging, train_seed);
            let data = TrainingSet::from_log(&log);
            let mut out = ExperimentResult::default();
            for &arm in &spec.methods {
                let started = Instant::now();
                let result = run_arm(&env, spec, arm, &data, eval_seed);
                let wall = spec
                    .record_wall_time
                    .then(|| started.elapsed().as_secs_f64());
                let mut row = ResultRow {
                    method: arm,
                    train_users,
                    seed,
                    ctr: None,
                    ci_low: None,
                    ci_high: None,
                    train_events: data.len() as u64,
                    wall_time: wall,
                };
                match result {
                    Ok((ab, warning)) => {
                        row.ctr = Some(ab.ctr);
                        row.ci_low = Some(ab.ci_low);
                        row.ci_high = Some(ab.ci_high);
                        if let Some(message) = warning {
                            out.not_converged.push(CellFailure {
                                method: arm,
                                train_users,
                                seed,
                                message,
                            });
                        }
                    }
                    Err(message) => out.failures.push(CellFailure {
                        method: arm,
                        train_users,
                        seed,
                        message,
                    }),
                }
                out.rows.push(row);
            }
            out
        })
        .collect();

    let mut all = ExperimentResult::default();
    for cell in per_cell {
        all.rows.extend(cell.rows);
        all.failures.extend(cell.failures);
        all.not_converged.extend(cell.not_converged);
    }
    let key = |m: Arm, u: u64, s: u64| (m, u, s);
    all.rows
        .sort_by_key(|r| key(r.method, r.train_users, r.seed));
    all.failures
        .sort_by_key(|r| key(r.method, r.train_users, r.seed));
    all.not_converged
        .sort_by_key(|r| key(r.method, r.train_users, r.seed));
    Ok(all)
}

pub const CSV_HEADER: &str = "method,train_users,seed,ctr,ci_low,ci_high,train_events,wall_time";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Svg,
}

pub fn emit_results<W: Write>(
    rows: &[ResultRow],
    format: OutputFormat,
    writer: W,
) -> Result<(), HarnessError> {
    match format {
        OutputFormat::Csv => write_csv(rows, writer),
        OutputFormat::Svg => {
            let svg = render_svg(rows)?;
            let mut w = writer;
            w.write_all(svg.as_bytes())?;
            w.flush()?;
            Ok(())
        }
    }
}

fn write_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::InvalidSpec(format!(
            "unexpected CSV header {:?}",
            header.join(",")
        )));
    }
    rdr.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(Into::into)
}

/// Mean CTR and mean interval bounds per (method, train_users), over seeds
/// with a successful run.
pub fn summarize(rows: &[ResultRow]) -> Vec<(Arm, u64, f64, f64, f64)> {
    let mut keys: Vec<(Arm, u64)> = rows.iter().map(|r| (r.method, r.train_users)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|(m, u)| {
            let ok: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.method == m && r.train_users == u && r.ctr.is_some())
                .collect();
            if ok.is_empty() {
                return None;
            }
            let k = ok.len() as f64;
            let mean = |f: fn(&ResultRow) -> Option<f64>| {
                ok.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / k
            };
            Some((
                m,
                u,
                mean(|r| r.ctr),
                mean(|r| r.ci_low),
                mean(|r| r.ci_high),
            ))
        })
        .collect()
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#17becf",
];

/// Line chart of mean CTR against training users with shaded interval bands.
pub fn render_svg(rows: &[ResultRow]) -> Result<String, HarnessError> {
    let summary = summarize(rows);
    if summary.is_empty() {
        return Err(HarnessError::NoRows);
    }
    let (width, height) = (760.0, 480.0);
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let mut users: Vec<u64> = summary.iter().map(|s| s.1).collect();
    users.sort();
    users.dedup();
    let lx = |u: u64| (u as f64).ln();
    let (x_min, x_max) = (lx(users[0]), lx(*users.last().unwrap()));
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let to_x = |u: u64| {
        if users.len() == 1 {
            left + plot_w / 2.0
        } else {
            left + (lx(u) - x_min) / x_span * plot_w
        }
    };
    let y_lo = summary.iter().map(|s| s.3).fold(f64::INFINITY, f64::min);
    let y_hi = summary
        .iter()
        .map(|s| s.4)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_hi - y_lo) * 0.05).max(1e-4);
    let (y_min, y_max) = ((y_lo - pad).max(0.0), y_hi + pad);
    let to_y = |v: f64| top + (1.0 - (v - y_min) / (y_max - y_min)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">A/B test CTR by number of training users</text>",
        left + plot_w / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        s,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.2}\" stroke=\"black\"/>",
        top + plot_h
    );
    for &u in &users {
        let x = to_x(u);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{u}</text>",
            top + plot_h,
            top + plot_h + 5.0,
            top + plot_h + 20.0
        );
    }
    for i in 0..=5 {
        let v = y_min + (y_max - y_min) * i as f64 / 5.0;
        let y = to_y(v);
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{left}\" y2=\"{y:.2}\" stroke=\"black\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.4}</text>",
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">training users</text>",
        left + plot_w / 2.0,
        height - 15.0
    );
    let _ = writeln!(
        s,
        "<text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">click-through rate</text>",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    let mut arms: Vec<Arm> = summary.iter().map(|s| s.0).collect();
    arms.dedup();
    for (k, arm) in arms.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<&(Arm, u64, f64, f64, f64)> = summary.iter().filter(|s| s.0 == *arm).collect();
        let upper: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", to_x(p.1), to_y(p.4)))
            .collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", to_x(p.1), to_y(p.3)))
            .collect();
        let _ = writeln!(
            s,
            "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", to_x(p.1), to_y(p.2)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            line.join(" ")
        );
        for p in &pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                to_x(p.1),
                to_y(p.2)
            );
        }
        let ly = top + 10.0 + 20.0 * k as f64;
        let lx0 = left + plot_w + 20.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx0:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\">{}</text>",
            lx0 + 24.0,
            lx0 + 30.0,
            ly + 4.0,
            arm.name()
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
