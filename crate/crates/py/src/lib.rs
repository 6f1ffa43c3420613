//! Python bindings: the simulator, interaction logs, policies, training and
//! off-policy estimators.

use std::path::PathBuf;

use crmkit_core::harness::confidence_interval;
use crmkit_core::log_io::{read_log_file, write_log_file, LogIoError};
use crmkit_core::objectives::{train as fit, Method, ObjectiveConfig, TrainingSet};
use crmkit_core::ope::{ips_estimate, snips_estimate, OpeReport};
use crmkit_core::optim::LbfgsConfig;
use crmkit_core::policy::{AnyPolicy, Policy as _, PopularityPolicy, UniformPolicy};
use crmkit_core::sim::{self, Actor, SimConfig};
use crmkit_core::InteractionLog as CoreLog;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn log_err(e: LogIoError) -> PyErr {
    if e.is_validation() {
        value_err(e)
    } else {
        PyOSError::new_err(e.to_string())
    }
}

/// Simulated recommender environment. `config` is a SimConfig JSON document;
/// omitted fields take their defaults.
#[pyclass(frozen, module = "crmkit")]
struct Environment {
    inner: sim::Environment,
}

#[pymethods]
impl Environment {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let config: SimConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(value_err)?,
            None => SimConfig::default(),
        };
        let inner = sim::Environment::new(config).map_err(value_err)?;
        Ok(Environment { inner })
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("serializable")
    }

    /// Log `num_users` users under `policy` (default: popularity logging).
    #[pyo3(signature = (num_users, seed = 0, policy = None))]
    fn generate_logs(
        &self,
        py: Python<'_>,
        num_users: u64,
        seed: u64,
        policy: Option<&Policy>,
    ) -> PyResult<InteractionLog> {
        let default =
            AnyPolicy::from(PopularityPolicy::new(self.inner.n_items(), 1.0).map_err(value_err)?);
        let logging = policy.map(|p| &p.inner).unwrap_or(&default);
        let log = py
            .detach(|| {
                self.inner
                    .try_generate_logs(num_users, Actor::Policy(logging), seed)
            })
            .map_err(value_err)?;
        Ok(InteractionLog { inner: log })
    }

    /// Simulated A/B test; `policy=None` deploys the oracle.
    #[pyo3(signature = (policy, num_users, seed = 0))]
    fn ab_test<'py>(
        &self,
        py: Python<'py>,
        policy: Option<&Policy>,
        num_users: u64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let actor = policy.map_or(Actor::Oracle, |p| Actor::Policy(&p.inner));
        let r = py
            .detach(|| self.inner.ab_test(actor, num_users, seed))
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("ctr", r.ctr)?;
        d.set_item("ci_low", r.ci_low)?;
        d.set_item("ci_high", r.ci_high)?;
        d.set_item("impressions", r.impressions)?;
        d.set_item("clicks", r.clicks)?;
        Ok(d)
    }

    /// Expected CTR from exact click probabilities; `policy=None` is the oracle.
    #[pyo3(signature = (policy, num_users, seed = 0))]
    fn true_ctr(
        &self,
        py: Python<'_>,
        policy: Option<&Policy>,
        num_users: u64,
        seed: u64,
    ) -> PyResult<f64> {
        let actor = policy.map_or(Actor::Oracle, |p| Actor::Policy(&p.inner));
        py.detach(|| self.inner.true_ctr(actor, num_users, seed))
            .map_err(value_err)
    }
}

#[pyclass(frozen, module = "crmkit")]
struct InteractionLog {
    inner: CoreLog,
}

#[pymethods]
impl InteractionLog {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(InteractionLog {
            inner: read_log_file(path).map_err(log_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_log_file(&self.inner, path).map_err(log_err)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items
    }

    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    fn bandit_count(&self) -> usize {
        self.inner.bandit_count()
    }

    fn organic_count(&self) -> usize {
        self.inner.organic_count()
    }

    fn empirical_ctr(&self) -> Option<f64> {
        self.inner.empirical_ctr()
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    /// Bandit events as `(contexts, actions, propensities, clicks)`.
    fn bandit_arrays(&self) -> (Vec<Vec<u32>>, Vec<usize>, Vec<f64>, Vec<u8>) {
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for e in self.inner.bandit_events() {
            out.0.push(e.context.0.clone());
            out.1.push(e.action.0);
            out.2.push(e.propensity);
            out.3.push(e.click);
        }
        out
    }
}

#[pyclass(frozen, module = "crmkit")]
struct Policy {
    inner: AnyPolicy,
}

#[pymethods]
impl Policy {
    #[staticmethod]
    #[pyo3(signature = (n_items, smoothing = 1.0))]
    fn popularity(n_items: usize, smoothing: f64) -> PyResult<Self> {
        let p = PopularityPolicy::new(n_items, smoothing).map_err(value_err)?;
        Ok(Policy { inner: p.into() })
    }

    #[staticmethod]
    fn uniform(n_items: usize) -> Self {
        Policy {
            inner: UniformPolicy::new(n_items).into(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Policy {
            inner: AnyPolicy::from_json(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn action_probs(&self, context: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.action_probs(&context).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Policy({})", self.inner.to_json())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &OpeReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("estimate", r.estimate)?;
    d.set_item("std_error", r.std_error)?;
    d.set_item("ci_low", r.ci_low)?;
    d.set_item("ci_high", r.ci_high)?;
    d.set_item("effective_sample_size", r.effective_sample_size)?;
    d.set_item("max_weight", r.max_weight)?;
    d.set_item("n", r.n)?;
    d.set_item("unreliable", r.unreliable)?;
    Ok(d)
}

/// Fit a policy on the bandit events of `log`. Returns the policy and a dict
/// describing the optimizer run.
#[pyfunction]
#[pyo3(signature = (log, method, alpha = 0.5, lam = 1.0, clip = None, max_iters = 500))]
fn train<'py>(
    py: Python<'py>,
    log: &InteractionLog,
    method: &str,
    alpha: f64,
    lam: f64,
    clip: Option<f64>,
    max_iters: usize,
) -> PyResult<(Policy, Bound<'py, PyDict>)> {
    let config = ObjectiveConfig {
        method: method.parse::<Method>().map_err(value_err)?,
        alpha,
        lambda: lam,
        clip_m: clip,
    };
    let optim = LbfgsConfig {
        max_iters,
        ..LbfgsConfig::default()
    };
    let out = py
        .detach(|| fit(&TrainingSet::from_log(&log.inner), &config, &optim))
        .map_err(value_err)?;
    let m = &out.minimum;
    let d = PyDict::new(py);
    d.set_item("value", m.value)?;
    d.set_item("grad_norm", m.grad_norm)?;
    d.set_item("iterations", m.iterations)?;
    d.set_item("converged", m.converged)?;
    Ok((Policy { inner: out.policy }, d))
}

#[pyfunction]
#[pyo3(signature = (log, policy, clip = None))]
fn ips<'py>(
    py: Python<'py>,
    log: &InteractionLog,
    policy: &Policy,
    clip: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let r =
        ips_estimate(&TrainingSet::from_log(&log.inner), &policy.inner, clip).map_err(value_err)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (log, policy, bootstrap = 1000, seed = 0))]
fn snips<'py>(
    py: Python<'py>,
    log: &InteractionLog,
    policy: &Policy,
    bootstrap: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = TrainingSet::from_log(&log.inner);
    let r = py
        .detach(|| snips_estimate(&data, &policy.inner, bootstrap, seed))
        .map_err(value_err)?;
    report_dict(py, &r)
}

/// Wilson score interval for `clicks` out of `impressions`.
#[pyfunction]
#[pyo3(signature = (clicks, impressions, level = 0.95))]
fn wilson_interval(clicks: u64, impressions: u64, level: f64) -> PyResult<(f64, f64)> {
    confidence_interval(clicks, impressions, level).map_err(value_err)
}

#[pymodule]
fn crmkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Environment>()?;
    m.add_class::<InteractionLog>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ips, m)?)?;
    m.add_function(wrap_pyfunction!(snips, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add(
        "METHODS",
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
