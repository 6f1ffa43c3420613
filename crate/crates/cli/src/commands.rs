use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crmkit_core::harness::{
    cell_seeds, emit_results, run_experiment, ExperimentResult, ExperimentSpec, OutputFormat,
};
use crmkit_core::log_io::{read_log_file, write_log_file};
use crmkit_core::objectives::{train as fit, Method, ObjectiveConfig, TrainingSet};
use crmkit_core::ope::{ips_estimate, snips_estimate, Estimator};
use crmkit_core::optim::LbfgsConfig;
use crmkit_core::policy::{AnyPolicy, Policy, PopularityPolicy, UniformPolicy};
use crmkit_core::sim::{Actor, Environment, SimConfig};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::error::CliError;
use crate::{
    CompareArgs, EvaluateArgs, LoggingKind, SimulateArgs, SweepArgs, SweepParam, TrainArgs,
};

pub struct Global {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Global {
    fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::invalid("--out is required"))
    }

    fn sim_config(&self) -> Result<SimConfig, CliError> {
        let config: SimConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => SimConfig::default(),
        };
        Ok(config)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn environment(config: SimConfig) -> Result<Environment, CliError> {
    Environment::new(config).map_err(CliError::invalid)
}

pub fn simulate(global: &Global, args: SimulateArgs) -> Result<(), CliError> {
    if args.users == 0 {
        return Err(CliError::invalid("--users must be at least 1"));
    }
    let out = global.out()?;
    let mut config = global.sim_config()?;
    if let Some(n) = args.items {
        config.n_items = n;
    }
    let env = environment(config)?;
    let n = env.n_items();
    let logging: AnyPolicy = match args.policy {
        LoggingKind::Popularity => PopularityPolicy::new(n, 1.0)
            .map_err(CliError::invalid)?
            .into(),
        LoggingKind::Uniform => UniformPolicy::new(n).into(),
    };
    let (population, _) = cell_seeds(global.seed);
    let log = env
        .try_generate_logs(args.users, Actor::Policy(&logging), population)
        .map_err(CliError::invalid)?;
    write_log_file(&log, out)?;
    eprintln!(
        "crmkit: wrote {} events to {}",
        log.events.len(),
        out.display()
    );
    emit(json!({
        "users": args.users,
        "organic_events": log.organic_count(),
        "bandit_events": log.bandit_count(),
        "empirical_ctr": log.empirical_ctr(),
    }));
    Ok(())
}

pub fn train(global: &Global, args: TrainArgs) -> Result<(), CliError> {
    let out = global.out()?;
    let from_file: Option<ObjectiveConfig> = global.config.as_deref().map(read_json).transpose()?;
    let method = match (&args.method, &from_file) {
        (Some(name), _) => name.parse::<Method>().map_err(CliError::invalid)?,
        (None, Some(cfg)) => cfg.method,
        (None, None) => return Err(CliError::invalid("--method is required")),
    };
    let mut config = from_file.unwrap_or_else(|| ObjectiveConfig::new(method));
    config.method = method;
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    if args.clip.is_some() {
        config.clip_m = args.clip;
    }
    config.validate().map_err(CliError::invalid)?;

    let log = read_log_file(&args.log)?;
    let data = TrainingSet::from_log(&log);
    let outcome = fit(&data, &config, &LbfgsConfig::default()).map_err(CliError::invalid)?;
    let m = &outcome.minimum;
    fs::write(out, outcome.policy.to_json() + "\n").map_err(|e| CliError::io(out, e))?;
    emit(json!({
        "method": method.name(),
        "value": m.value,
        "grad_norm": m.grad_norm,
        "iterations": m.iterations,
        "converged": m.converged,
    }));
    if m.converged {
        Ok(())
    } else {
        Err(CliError::Optimizer(format!(
            "optimizer stopped without converging ({:?}); policy written to {}",
            m.termination,
            out.display()
        )))
    }
}

pub fn evaluate(global: &Global, args: EvaluateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.policy).map_err(|e| CliError::io(&args.policy, e))?;
    let policy = AnyPolicy::from_json(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", args.policy.display())))?;

    if args.ab {
        if args.users == 0 {
            return Err(CliError::invalid("--users must be at least 1"));
        }
        let env = environment(global.sim_config()?)?;
        let (_, population) = cell_seeds(global.seed);
        let report = env
            .ab_test(Actor::Policy(&policy), args.users, population)
            .map_err(CliError::invalid)?;
        emit(serde_json::to_value(report).expect("serializable"));
        return Ok(());
    }

    let estimator: Estimator = args.estimator.parse().map_err(CliError::invalid)?;
    let path = args.log.as_ref().expect("required by clap");
    let log = read_log_file(path)?;
    if log.n_items != policy.n_items() {
        return Err(CliError::invalid(format!(
            "policy covers {} items, log has {}",
            policy.n_items(),
            log.n_items
        )));
    }
    let data = TrainingSet::from_log(&log);
    let report = match estimator {
        Estimator::Ips => ips_estimate(&data, &policy, args.clip),
        Estimator::Snips => snips_estimate(&data, &policy, args.bootstrap, global.seed),
    }
    .map_err(CliError::invalid)?;
    emit(serde_json::to_value(report).expect("serializable"));
    Ok(())
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec, CliError> {
    let spec: ExperimentSpec = match path {
        Some(p) => read_json(p)?,
        None => ExperimentSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn report_problems(result: &ExperimentResult, errors_path: &Path) -> Result<(), CliError> {
    let mut w = create_file(errors_path)?;
    for (kind, list) in [
        ("failure", &result.failures),
        ("not_converged", &result.not_converged),
    ] {
        for f in list {
            eprintln!(
                "crmkit: {kind}: {} train_users={} seed={}: {}",
                f.method, f.train_users, f.seed, f.message
            );
            let line = json!({
                "kind": kind,
                "method": f.method,
                "train_users": f.train_users,
                "seed": f.seed,
                "message": f.message,
            });
            writeln!(w, "{line}").map_err(|e| CliError::io(errors_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(errors_path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn compare(global: &Global, args: CompareArgs) -> Result<(), CliError> {
    let dir = global.out()?;
    let spec = load_spec(args.spec.as_deref())?;
    prepare_dir(dir)?;
    let result = run_experiment(&spec)?;
    let csv_path = dir.join("results.csv");
    emit_results(&result.rows, OutputFormat::Csv, create_file(&csv_path)?)?;
    let svg_path = dir.join("results.svg");
    emit_results(&result.rows, OutputFormat::Svg, create_file(&svg_path)?)?;
    report_problems(&result, &dir.join("errors.jsonl"))?;
    emit(json!({
        "rows": result.rows.len(),
        "failures": result.failures.len(),
        "not_converged": result.not_converged.len(),
        "csv": csv_path,
        "svg": svg_path,
    }));
    Ok(())
}

pub fn sweep(global: &Global, args: SweepArgs) -> Result<(), CliError> {
    let dir = global.out()?;
    let base = load_spec(args.spec.as_deref())?;
    prepare_dir(dir)?;
    let name = match args.param {
        SweepParam::Alpha => "alpha",
        SweepParam::Lambda => "lambda",
        SweepParam::Clip => "clip",
    };
    let path = dir.join("sweep.csv");
    let mut w = create_file(&path)?;
    let mut header_written = false;
    let mut combined = ExperimentResult::default();
    for &value in &args.values {
        let mut spec = base.clone();
        match args.param {
            SweepParam::Alpha => spec.hyper.alpha = value,
            SweepParam::Lambda => spec.hyper.lambda = value,
            SweepParam::Clip => spec.hyper.clip_m = Some(value),
        }
        spec.validate()?;
        let result = run_experiment(&spec)?;
        let mut buf = Vec::new();
        emit_results(&result.rows, OutputFormat::Csv, &mut buf)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header_written {
            writeln!(w, "param,value,{header}").map_err(|e| CliError::io(&path, e))?;
            header_written = true;
        }
        for line in lines {
            writeln!(w, "{name},{value},{line}").map_err(|e| CliError::io(&path, e))?;
        }
        emit(json!({
            "param": name,
            "value": value,
            "rows": result.rows.len(),
            "failures": result.failures.len(),
            "not_converged": result.not_converged.len(),
        }));
        combined.failures.extend(result.failures);
        combined.not_converged.extend(result.not_converged);
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    report_problems(&combined, &dir.join("errors.jsonl"))
}
