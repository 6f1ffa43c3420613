//! Training objectives over logged bandit data.
//!
//! Every objective is a loss to minimize and returns its value together with
//! the exact gradient. Parameters are an n×n matrix stored row-major, so entry
//! `j * n + a` multiplies context feature `j` when scoring action `a`. For the
//! click models this is the flattened β of `σ((x ⊗ a)ᵀβ)`; for the policy
//! objectives it is θ in `π_θ(a|x) = softmax(xᵀθ)[a]`.
//!
//! Per-sample sums are evaluated in fixed-size chunks (in parallel) and the
//! chunk results are combined in index order, so results do not depend on the
//! number of threads.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{minimize, LbfgsConfig, Minimum, OptimError};
use crate::policy::{
    linear_scores, log_softmax, sigmoid, AnyPolicy, CtrModelPolicy, LinearSoftmaxPolicy, Mode,
};
use crate::types::InteractionLog;

const CHUNK: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("parameter vector has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training data: {0}")]
    InvalidData(String),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("variance penalty needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("all importance weights are zero")]
    ZeroWeights,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Logged samples `(x_i, a_i, p0_i, c_i)` in dense form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    n_items: usize,
    contexts: Vec<f64>,
    actions: Vec<usize>,
    propensities: Vec<f64>,
    clicks: Vec<f64>,
}

impl TrainingSet {
    /// `contexts` is row-major N × n.
    pub fn new(
        n_items: usize,
        contexts: Vec<f64>,
        actions: Vec<usize>,
        propensities: Vec<f64>,
        clicks: Vec<u8>,
    ) -> Result<Self, ObjectiveError> {
        let n = actions.len();
        if n_items == 0 {
            return Err(ObjectiveError::InvalidData(
                "n_items must be positive".into(),
            ));
        }
        if contexts.len() != n * n_items || propensities.len() != n || clicks.len() != n {
            return Err(ObjectiveError::InvalidData(format!(
                "inconsistent lengths: {} contexts, {} actions, {} propensities, {} clicks",
                contexts.len() / n_items,
                n,
                propensities.len(),
                clicks.len()
            )));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= n_items) {
            return Err(ObjectiveError::InvalidData(format!(
                "action {a} out of range"
            )));
        }
        if let Some(p) = propensities.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
            return Err(ObjectiveError::InvalidData(format!(
                "propensity {p} outside (0, 1]"
            )));
        }
        if let Some(c) = clicks.iter().find(|&&c| c > 1) {
            return Err(ObjectiveError::InvalidData(format!(
                "click {c} is not 0 or 1"
            )));
        }
        if contexts.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ObjectiveError::InvalidData(
                "contexts must be finite and non-negative".into(),
            ));
        }
        Ok(TrainingSet {
            n_items,
            contexts,
            actions,
            propensities,
            clicks: clicks.into_iter().map(f64::from).collect(),
        })
    }

    pub fn from_log(log: &InteractionLog) -> Self {
        let mut contexts = Vec::new();
        let mut actions = Vec::new();
        let mut propensities = Vec::new();
        let mut clicks = Vec::new();
        for b in log.bandit_events() {
            contexts.extend(b.context.counts().iter().map(|&c| f64::from(c)));
            actions.push(b.action.0);
            propensities.push(b.propensity);
            clicks.push(f64::from(b.click));
        }
        TrainingSet {
            n_items: log.n_items,
            contexts,
            actions,
            propensities,
            clicks,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn context(&self, i: usize) -> &[f64] {
        &self.contexts[i * self.n_items..(i + 1) * self.n_items]
    }

    pub fn action(&self, i: usize) -> usize {
        self.actions[i]
    }

    pub fn propensity(&self, i: usize) -> f64 {
        self.propensities[i]
    }

    pub fn click(&self, i: usize) -> f64 {
        self.clicks[i]
    }

    pub fn clicks(&self) -> &[f64] {
        &self.clicks
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    /// Same samples in the order given by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut contexts = Vec::with_capacity(self.contexts.len());
        for &i in order {
            contexts.extend_from_slice(self.context(i));
        }
        TrainingSet {
            n_items: self.n_items,
            contexts,
            actions: order.iter().map(|&i| self.actions[i]).collect(),
            propensities: order.iter().map(|&i| self.propensities[i]).collect(),
            clicks: order.iter().map(|&i| self.clicks[i]).collect(),
        }
    }

    /// Keeps the samples for which `keep` returns true.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let order: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.permuted(&order)
    }

    /// Copy with every propensity multiplied by `factor`. The result may hold
    /// propensities above 1 and is meant for estimator invariance checks.
    pub fn with_scaled_propensities(&self, factor: f64) -> Self {
        TrainingSet {
            propensities: self.propensities.iter().map(|p| p * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "likelihood")]
    Likelihood,
    #[serde(rename = "ips-likelihood")]
    IpsLikelihood,
    #[serde(rename = "cb")]
    ContextualBandit,
    #[serde(rename = "dual")]
    Dual,
    #[serde(rename = "poem")]
    Poem,
    #[serde(rename = "snips")]
    Snips,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Likelihood,
        Method::IpsLikelihood,
        Method::ContextualBandit,
        Method::Dual,
        Method::Poem,
        Method::Snips,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Likelihood => "likelihood",
            Method::IpsLikelihood => "ips-likelihood",
            Method::ContextualBandit => "cb",
            Method::Dual => "dual",
            Method::Poem => "poem",
            Method::Snips => "snips",
        }
    }

    /// Whether the method fits a click model rather than a policy directly.
    pub fn models_clicks(self) -> bool {
        matches!(self, Method::Likelihood | Method::IpsLikelihood)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ObjectiveError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub method: Method,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub clip_m: Option<f64>,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    1.0
}

impl ObjectiveConfig {
    pub fn new(method: Method) -> Self {
        ObjectiveConfig {
            method,
            alpha: default_alpha(),
            lambda: default_lambda(),
            clip_m: None,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(m) = self.clip_m {
            if !(m > 0.0) {
                return Err(ObjectiveError::InvalidConfig(format!(
                    "clip_m must be positive, got {m}"
                )));
            }
        }
        Ok(())
    }
}

pub type ValueGrad = (f64, Vec<f64>);

fn check_params(params: &[f64], data: &TrainingSet) -> Result<(), ObjectiveError> {
    let expected = data.n_items * data.n_items;
    if params.len() != expected {
        return Err(ObjectiveError::DimensionMismatch {
            expected,
            got: params.len(),
        });
    }
    Ok(())
}

/// Runs `f` over fixed chunks of `0..len` in parallel; results come back in
/// chunk order.
fn chunked<A: Send>(len: usize, f: impl Fn(Range<usize>) -> A + Sync) -> Vec<A> {
    (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(len)))
        .collect()
}

fn sum_value_grads(parts: Vec<ValueGrad>, dim: usize) -> ValueGrad {
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    for (v, g) in parts {
        value += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (value, grad)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Adds `coef · ∇_θ log π_θ(a | x)` to `grad`, where `probs = π_θ(· | x)`.
fn add_log_policy_grad(grad: &mut [f64], x: &[f64], probs: &[f64], a: usize, coef: f64) {
    let n = x.len();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &mut grad[j * n..(j + 1) * n];
        let scaled = coef * xj;
        for (b, (g, &p)) in row.iter_mut().zip(probs).enumerate() {
            let indicator = if b == a { 1.0 } else { 0.0 };
            *g += scaled * (indicator - p);
        }
    }
}

/// Weighted binary cross-entropy of the logistic click model, normalized by
/// the total weight. `weight(i) = 1` gives plain likelihood.
fn weighted_bce(
    beta: &[f64],
    data: &TrainingSet,
    weight: impl Fn(usize) -> f64 + Sync,
) -> Result<ValueGrad, ObjectiveError> {
    check_params(beta, data)?;
    if data.is_empty() {
        return Err(ObjectiveError::InvalidData("no samples".into()));
    }
    let n = data.n_items;
    let dim = n * n;
    let parts = chunked(data.len(), |range| {
        let mut value = 0.0;
        let mut wsum = 0.0;
        let mut grad = vec![0.0; dim];
        for i in range {
            let x = data.context(i);
            let a = data.action(i);
            let c = data.click(i);
            let w = weight(i);
            let score: f64 = x
                .iter()
                .enumerate()
                .filter(|(_, &xj)| xj != 0.0)
                .map(|(j, &xj)| xj * beta[j * n + a])
                .sum();
            value += w * (softplus(score) - c * score);
            wsum += w;
            let r = w * (sigmoid(score) - c);
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    grad[j * n + a] += r * xj;
                }
            }
        }
        (value, wsum, grad)
    });
    let mut wsum = 0.0;
    let mut vg = Vec::with_capacity(parts.len());
    for (v, w, g) in parts {
        wsum += w;
        vg.push((v, g));
    }
    let (value, mut grad) = sum_value_grads(vg, dim);
    for g in grad.iter_mut() {
        *g /= wsum;
    }
    Ok((value / wsum, grad))
}

/// Mean binary cross-entropy of `σ((x ⊗ a)ᵀβ)` against the logged clicks.
pub fn likelihood_loss(beta: &[f64], data: &TrainingSet) -> Result<ValueGrad, ObjectiveError> {
    weighted_bce(beta, data, |_| 1.0)
}

/// Cross-entropy with samples weighted by `1 / p0`, normalized by the weight sum.
pub fn ips_likelihood_loss(beta: &[f64], data: &TrainingSet) -> Result<ValueGrad, ObjectiveError> {
    weighted_bce(beta, data, |i| 1.0 / data.propensity(i))
}

/// Negated importance-weighted log-likelihood of the logged actions,
/// `-(1/N) Σ (c_i / p0_i) log π_θ(a_i | x_i)`. Unclicked samples carry zero
/// weight.
pub fn cb_loss(theta: &[f64], data: &TrainingSet) -> Result<ValueGrad, ObjectiveError> {
    check_params(theta, data)?;
    if data.is_empty() {
        return Err(ObjectiveError::InvalidData("no samples".into()));
    }
    let dim = data.n_items * data.n_items;
    let parts = chunked(data.len(), |range| {
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        for i in range {
            let c = data.click(i);
            if c == 0.0 {
                continue;
            }
            let w = c / data.propensity(i);
            let x = data.context(i);
            let a = data.action(i);
            let log_probs = log_softmax(&linear_scores(theta, x));
            value -= w * log_probs[a];
            let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
            add_log_policy_grad(&mut grad, x, &probs, a, -w);
        }
        (value, grad)
    });
    let (value, mut grad) = sum_value_grads(parts, dim);
    let n = data.len() as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((value / n, grad))
}

/// `(1 − α) · cb_loss(θ) + α · likelihood_loss(θ)` with shared parameters.
pub fn dual_loss(
    theta: &[f64],
    data: &TrainingSet,
    alpha: f64,
) -> Result<ValueGrad, ObjectiveError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ObjectiveError::InvalidConfig(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return cb_loss(theta, data);
    }
    if alpha == 1.0 {
        return likelihood_loss(theta, data);
    }
    let (cv, cg) = cb_loss(theta, data)?;
    let (lv, lg) = likelihood_loss(theta, data)?;
    let grad = cg
        .iter()
        .zip(&lg)
        .map(|(c, l)| (1.0 - alpha) * c + alpha * l)
        .collect();
    Ok(((1.0 - alpha) * cv + alpha * lv, grad))
}

/// Per-sample importance ratio `π_θ(a_i|x_i) / p0_i`.
fn importance_ratios(theta: &[f64], data: &TrainingSet) -> Vec<f64> {
    chunked(data.len(), |range| {
        range
            .map(|i| {
                let lp = log_softmax(&linear_scores(theta, data.context(i)));
                lp[data.action(i)].exp() / data.propensity(i)
            })
            .collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Accumulates `Σ_i coef_i · ratio_i · ∇ log π_θ(a_i|x_i)`, skipping zero coefficients.
fn ratio_gradient(theta: &[f64], data: &TrainingSet, coefs: &[f64], ratios: &[f64]) -> Vec<f64> {
    let dim = data.n_items * data.n_items;
    let parts = chunked(data.len(), |range| {
        let mut grad = vec![0.0; dim];
        for i in range {
            let k = coefs[i] * ratios[i];
            if k == 0.0 {
                continue;
            }
            let x = data.context(i);
            let probs: Vec<f64> = log_softmax(&linear_scores(theta, x))
                .into_iter()
                .map(f64::exp)
                .collect();
            add_log_policy_grad(&mut grad, x, &probs, data.action(i), k);
        }
        (0.0, grad)
    });
    sum_value_grads(parts, dim).1
}

fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |a, b| a + b)
}

/// Variance-penalized IPS (the CRM objective):
/// `-(R̂ − λ √(S²/N))` with `u_i = c_i · min(π_θ/p0, M)`, `R̂ = mean(u)` and
/// `S²` the sample variance of `u`.
pub fn poem_loss(
    theta: &[f64],
    data: &TrainingSet,
    lambda: f64,
    clip_m: Option<f64>,
) -> Result<ValueGrad, ObjectiveError> {
    check_params(theta, data)?;
    let n = data.len();
    if n == 0 {
        return Err(ObjectiveError::InvalidData("no samples".into()));
    }
    if lambda > 0.0 && n < 2 {
        return Err(ObjectiveError::TooFewSamples(n));
    }
    let ratios = importance_ratios(theta, data);
    let clipped: Vec<bool> = ratios
        .iter()
        .map(|&r| clip_m.is_some_and(|m| r > m))
        .collect();
    let u: Vec<f64> = (0..n)
        .map(|i| {
            let r = if clipped[i] {
                clip_m.unwrap()
            } else {
                ratios[i]
            };
            data.click(i) * r
        })
        .collect();
    let nf = n as f64;
    let mean = ordered_sum(u.iter().copied()) / nf;
    let penalty = if lambda > 0.0 {
        let var = ordered_sum(u.iter().map(|v| (v - mean).powi(2))) / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    let value = -(mean - lambda * penalty);
    // d value / d u_i
    let coefs: Vec<f64> = (0..n)
        .map(|i| {
            if clipped[i] || data.click(i) == 0.0 {
                return 0.0;
            }
            let mut d = -1.0 / nf;
            if lambda > 0.0 && penalty > 0.0 {
                let dvar = 2.0 * (u[i] - mean) / (nf - 1.0);
                d += lambda * dvar / (2.0 * nf * penalty);
            }
            d * data.click(i)
        })
        .collect();
    Ok((value, ratio_gradient(theta, data, &coefs, &ratios)))
}

/// Variance-penalized self-normalized IPS:
/// `-(R̂ − λ √(V̂/N))` with `R̂ = Σ c_i s_i / Σ s_i`, `s_i = π_θ/p0`, and `V̂`
/// the delta-method variance of the ratio, i.e. the sample variance of
/// `c_i s_i − R̂ s_i` divided by `mean(s)²`.
pub fn snips_loss(
    theta: &[f64],
    data: &TrainingSet,
    lambda: f64,
) -> Result<ValueGrad, ObjectiveError> {
    check_params(theta, data)?;
    let n = data.len();
    if n == 0 {
        return Err(ObjectiveError::InvalidData("no samples".into()));
    }
    if lambda > 0.0 && n < 2 {
        return Err(ObjectiveError::TooFewSamples(n));
    }
    let s = importance_ratios(theta, data);
    let c = data.clicks();
    let nf = n as f64;
    let sum_s = ordered_sum(s.iter().copied());
    if !(sum_s > 0.0) {
        return Err(ObjectiveError::ZeroWeights);
    }
    let sum_u = ordered_sum(s.iter().zip(c).map(|(s, c)| s * c));
    let r = sum_u / sum_s;
    // dR/ds_i
    let dr: Vec<f64> = c.iter().map(|&ci| (ci - r) / sum_s).collect();

    let mut value = -r;
    let mut coefs: Vec<f64> = dr.iter().map(|d| -d).collect();
    if lambda > 0.0 {
        let d: Vec<f64> = s.iter().zip(c).map(|(&si, &ci)| (ci - r) * si).collect();
        let d_mean = ordered_sum(d.iter().copied()) / nf;
        let var = ordered_sum(d.iter().map(|v| (v - d_mean).powi(2))) / (nf - 1.0);
        let m = sum_s / nf;
        let v_hat = var / (m * m);
        let penalty = (v_hat / nf).sqrt();
        value += lambda * penalty;
        if penalty > 0.0 {
            let cross = ordered_sum(d.iter().zip(&s).map(|(di, si)| (di - d_mean) * si));
            for i in 0..n {
                let dvar = 2.0 / (nf - 1.0) * ((d[i] - d_mean) * (c[i] - r) - cross * dr[i]);
                let dv_hat = dvar / (m * m) - 2.0 * var / (m * m * m * nf);
                coefs[i] += lambda * dv_hat / (2.0 * nf * penalty);
            }
        }
    }
    Ok((value, ratio_gradient(theta, data, &coefs, &s)))
}

/// A configured objective bound to a training set.
pub struct Objective<'a> {
    data: &'a TrainingSet,
    config: ObjectiveConfig,
}

impl<'a> Objective<'a> {
    pub fn new(data: &'a TrainingSet, config: ObjectiveConfig) -> Result<Self, ObjectiveError> {
        config.validate()?;
        Ok(Objective { data, config })
    }

    pub fn dim(&self) -> usize {
        self.data.n_items * self.data.n_items
    }

    pub fn evaluate(&self, params: &[f64]) -> Result<ValueGrad, ObjectiveError> {
        let d = self.data;
        let c = &self.config;
        match c.method {
            Method::Likelihood => likelihood_loss(params, d),
            Method::IpsLikelihood => ips_likelihood_loss(params, d),
            Method::ContextualBandit => cb_loss(params, d),
            Method::Dual => dual_loss(params, d, c.alpha),
            Method::Poem => poem_loss(params, d, c.lambda, c.clip_m),
            Method::Snips => snips_loss(params, d, c.lambda),
        }
    }

    pub fn value(&self, params: &[f64]) -> Result<f64, ObjectiveError> {
        self.evaluate(params).map(|(v, _)| v)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: AnyPolicy,
    pub minimum: Minimum,
}

impl TrainOutcome {
    pub fn converged(&self) -> bool {
        self.minimum.converged
    }
}

/// Fits `config.method` on `data` with L-BFGS from zero parameters.
///
/// Click-model methods return a [`CtrModelPolicy`]; the others a greedy
/// [`LinearSoftmaxPolicy`]. A run that stops without meeting the gradient
/// tolerance still returns its best iterate; check [`TrainOutcome::converged`].
pub fn train(
    data: &TrainingSet,
    config: &ObjectiveConfig,
    optim: &LbfgsConfig,
) -> Result<TrainOutcome, TrainError> {
    if data.len() < 2 {
        return Err(ObjectiveError::TooFewSamples(data.len()).into());
    }
    let objective = Objective::new(data, config.clone())?;
    let x0 = vec![0.0; objective.dim()];
    objective.evaluate(&x0)?;
    let minimum = minimize(
        |x: &[f64]| match objective.evaluate(x) {
            Ok(vg) => vg,
            Err(_) => (f64::INFINITY, vec![f64::NAN; x.len()]),
        },
        &x0,
        optim,
    )?;
    let n = data.n_items;
    let policy = if config.method.models_clicks() {
        CtrModelPolicy::new(n, minimum.x.clone())
            .expect("finite iterate")
            .into()
    } else {
        LinearSoftmaxPolicy::new(n, minimum.x.clone(), Mode::Greedy)
            .expect("finite iterate")
            .into()
    };
    Ok(TrainOutcome { policy, minimum })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n_samples: usize, n: usize, click_rate: f64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut contexts = Vec::new();
        let mut actions = Vec::new();
        let mut props = Vec::new();
        let mut clicks = Vec::new();
        for _ in 0..n_samples {
            for _ in 0..n {
                contexts.push(f64::from(rng.random_range(0u32..4)));
            }
            actions.push(rng.random_range(0..n));
            props.push(rng.random_range(0.05..1.0));
            clicks.push(u8::from(rng.random_bool(click_rate)));
        }
        TrainingSet::new(n, contexts, actions, props, clicks).unwrap()
    }

    fn random_params(seed: u64, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max)
    }

    fn check_fd(f: impl Fn(&[f64]) -> ValueGrad, x: &[f64], tol: f64) {
        let (_, g) = f(x);
        let num = finite_difference_gradient(|p| f(p).0, x, 1e-5);
        let err = max_rel_err(&g, &num);
        assert!(err <= tol, "relative gradient error {err:e}");
    }

    #[test]
    fn likelihood_at_zero_is_ln2() {
        let data = random_set(1, 20, 3, 0.3);
        let (v, _) = likelihood_loss(&[0.0; 9], &data).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn likelihood_gradient() {
        let data = random_set(2, 20, 3, 0.3);
        check_fd(
            |b| likelihood_loss(b, &data).unwrap(),
            &random_params(3, 9),
            1e-5,
        );
    }

    #[test]
    fn likelihood_gradient_is_block_sparse() {
        let data = TrainingSet::new(3, vec![1.0, 0.0, 0.0], vec![0], vec![0.5], vec![1]).unwrap();
        let (_, g) = likelihood_loss(&random_params(4, 9), &data).unwrap();
        for (k, v) in g.iter().enumerate() {
            assert_eq!(*v != 0.0, k == 0, "entry {k}");
        }
    }

    #[test]
    fn ips_likelihood_with_constant_propensity_matches_likelihood() {
        let base = random_set(5, 30, 3, 0.3);
        let data = TrainingSet {
            propensities: vec![0.25; base.len()],
            ..base
        };
        let beta = random_params(6, 9);
        let (v1, g1) = likelihood_loss(&beta, &data).unwrap();
        let (v2, g2) = ips_likelihood_loss(&beta, &data).unwrap();
        assert!((v1 - v2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
        check_fd(|b| ips_likelihood_loss(b, &data).unwrap(), &beta, 1e-5);
    }

    #[test]
    fn ips_likelihood_weights_are_inverse_propensities() {
        // two identical samples apart from propensity: the 0.01 one weighs 50x
        let data = TrainingSet::new(
            2,
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0, 0],
            vec![0.01, 0.5],
            vec![1, 0],
        )
        .unwrap();
        let beta = [0.3, 0.0, 0.0, 0.0];
        let (v, _) = ips_likelihood_loss(&beta, &data).unwrap();
        let s = 0.3;
        let expected = (100.0 * (softplus(s) - s) + 2.0 * softplus(s)) / 102.0;
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn cb_all_unclicked_is_zero() {
        let data = random_set(7, 20, 3, 0.0);
        let (v, g) = cb_loss(&random_params(8, 9), &data).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cb_hand_value() {
        let data =
            TrainingSet::new(4, vec![1.0, 2.0, 0.0, 1.0], vec![2], vec![0.2], vec![1]).unwrap();
        let (v, _) = cb_loss(&[0.0; 16], &data).unwrap();
        assert!((v - 5.0 * 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cb_gradient() {
        let data = random_set(9, 20, 3, 0.4);
        check_fd(|t| cb_loss(t, &data).unwrap(), &random_params(10, 9), 1e-5);
    }

    #[test]
    fn cb_ignores_unclicked_samples_up_to_scale() {
        let data = random_set(11, 40, 3, 0.3);
        let theta = random_params(12, 9);
        let clicked = data.filter(|i| data.click(i) == 1.0);
        let (v_all, g_all) = cb_loss(&theta, &data).unwrap();
        let (v_c, g_c) = cb_loss(&theta, &clicked).unwrap();
        let scale = clicked.len() as f64 / data.len() as f64;
        assert!((v_all - v_c * scale).abs() < 1e-13);
        for (a, b) in g_all.iter().zip(&g_c) {
            assert!((a - b * scale).abs() < 1e-13);
        }
    }

    #[test]
    fn dual_endpoints_are_exact() {
        let data = random_set(13, 25, 3, 0.3);
        let theta = random_params(14, 9);
        assert_eq!(
            dual_loss(&theta, &data, 0.0).unwrap(),
            cb_loss(&theta, &data).unwrap()
        );
        assert_eq!(
            dual_loss(&theta, &data, 1.0).unwrap(),
            likelihood_loss(&theta, &data).unwrap()
        );
        check_fd(|t| dual_loss(t, &data, 0.5).unwrap(), &theta, 1e-5);
        assert!(dual_loss(&theta, &data, 1.5).is_err());
    }

    #[test]
    fn poem_without_penalty_is_negative_ips() {
        let data = random_set(15, 30, 3, 0.3);
        let theta = random_params(16, 9);
        let (v, _) = poem_loss(&theta, &data, 0.0, None).unwrap();
        let mut ips = 0.0;
        for i in 0..data.len() {
            let p = crate::policy::softmax(&linear_scores(&theta, data.context(i)));
            ips += data.click(i) * p[data.action(i)] / data.propensity(i);
        }
        ips /= data.len() as f64;
        assert!((v + ips).abs() < 1e-12);
    }

    #[test]
    fn poem_zero_variance_has_no_penalty() {
        // every sample clicked with propensity equal to the uniform policy's
        let n = 3;
        let data = TrainingSet::new(
            n,
            vec![1.0; 4 * n],
            vec![0, 1, 2, 0],
            vec![1.0 / 3.0; 4],
            vec![1; 4],
        )
        .unwrap();
        let (v0, _) = poem_loss(&[0.0; 9], &data, 0.0, None).unwrap();
        let (v1, _) = poem_loss(&[0.0; 9], &data, 1.0, None).unwrap();
        assert!((v0 - v1).abs() < 1e-15);
        assert!((v0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn poem_gradient() {
        let data = random_set(17, 30, 3, 0.4);
        let theta = random_params(18, 9);
        check_fd(|t| poem_loss(t, &data, 1.0, None).unwrap(), &theta, 1e-4);
        // with a clip constant that no sample reaches at this point
        check_fd(
            |t| poem_loss(t, &data, 1.0, Some(1e6)).unwrap(),
            &theta,
            1e-4,
        );
    }

    #[test]
    fn poem_clipped_samples_have_zero_gradient() {
        let data = TrainingSet::new(2, vec![1.0, 0.0], vec![0], vec![0.1], vec![1]).unwrap();
        let (v, g) = poem_loss(&[0.0; 4], &data, 0.0, Some(2.0)).unwrap();
        assert_eq!(v, -2.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn poem_needs_two_samples_for_penalty() {
        let data = TrainingSet::new(2, vec![1.0, 0.0], vec![0], vec![0.5], vec![1]).unwrap();
        assert_eq!(
            poem_loss(&[0.0; 4], &data, 1.0, None).unwrap_err(),
            ObjectiveError::TooFewSamples(1)
        );
        assert!(poem_loss(&[0.0; 4], &data, 0.0, None).is_ok());
    }

    #[test]
    fn snips_all_clicked_is_one() {
        let base = random_set(19, 20, 3, 0.0);
        let data = TrainingSet {
            clicks: vec![1.0; base.len()],
            ..base
        };
        let (v, _) = snips_loss(&random_params(20, 9), &data, 0.0).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn snips_of_logging_policy_is_mean_click() {
        let base = random_set(21, 24, 3, 0.3);
        // a uniform target with uniform logging gives unit ratios
        let data = TrainingSet {
            propensities: vec![1.0 / 3.0; base.len()],
            ..base
        };
        let (v, _) = snips_loss(&[0.0; 9], &data, 0.0).unwrap();
        let mean_c = data.clicks().iter().sum::<f64>() / data.len() as f64;
        assert!((v + mean_c).abs() < 1e-12);
    }

    #[test]
    fn snips_gradient() {
        let data = random_set(22, 30, 3, 0.4);
        let theta = random_params(23, 9);
        check_fd(|t| snips_loss(t, &data, 0.0).unwrap(), &theta, 1e-4);
        check_fd(|t| snips_loss(t, &data, 1.0).unwrap(), &theta, 1e-4);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let data = random_set(24, 50, 3, 0.3);
        let mut order: Vec<usize> = (0..50).collect();
        order.reverse();
        order.swap(3, 17);
        let perm = data.permuted(&order);
        let theta = random_params(25, 9);
        for m in Method::ALL {
            let obj = Objective::new(&data, ObjectiveConfig::new(m)).unwrap();
            let objp = Objective::new(&perm, ObjectiveConfig::new(m)).unwrap();
            let (v1, g1) = obj.evaluate(&theta).unwrap();
            let (v2, g2) = objp.evaluate(&theta).unwrap();
            assert!((v1 - v2).abs() < 1e-12, "{m}");
            for (a, b) in g1.iter().zip(&g2) {
                assert!((a - b).abs() < 1e-12, "{m}");
            }
        }
    }

    #[test]
    fn dimension_mismatch_reported() {
        let data = random_set(26, 5, 3, 0.3);
        for m in Method::ALL {
            let obj = Objective::new(&data, ObjectiveConfig::new(m)).unwrap();
            assert!(matches!(
                obj.evaluate(&[0.0; 4]),
                Err(ObjectiveError::DimensionMismatch { .. })
            ));
        }
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("contextual_bandit".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig::new(Method::Dual);
        c.alpha = -0.1;
        assert!(c.validate().is_err());
        let mut c = ObjectiveConfig::new(Method::Poem);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        c.lambda = 1.0;
        c.clip_m = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_cb_without_clicks_stays_at_zero() {
        let data = random_set(27, 30, 3, 0.0);
        let out = train(
            &data,
            &ObjectiveConfig::new(Method::ContextualBandit),
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(out.converged());
        assert_eq!(out.minimum.iterations, 0);
        match out.policy {
            AnyPolicy::LinearSoftmax(p) => assert!(p.theta().iter().all(|&t| t == 0.0)),
            other => panic!("unexpected policy {other:?}"),
        }
    }

    #[test]
    fn train_dual_alpha_zero_equals_cb() {
        let data = random_set(28, 200, 3, 0.3);
        let mut dual = ObjectiveConfig::new(Method::Dual);
        dual.alpha = 0.0;
        let a = train(&data, &dual, &LbfgsConfig::default()).unwrap();
        let b = train(
            &data,
            &ObjectiveConfig::new(Method::ContextualBandit),
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn train_rejects_single_sample() {
        let data = random_set(29, 1, 3, 1.0);
        assert!(train(
            &data,
            &ObjectiveConfig::new(Method::Poem),
            &LbfgsConfig::default()
        )
        .is_err());
    }

    #[test]
    fn training_set_validation() {
        assert!(TrainingSet::new(2, vec![0.0; 2], vec![0], vec![0.0], vec![0]).is_err());
        assert!(TrainingSet::new(2, vec![0.0; 2], vec![2], vec![0.5], vec![0]).is_err());
        assert!(TrainingSet::new(2, vec![0.0; 3], vec![0], vec![0.5], vec![0]).is_err());
        assert!(TrainingSet::new(2, vec![0.0; 2], vec![0], vec![0.5], vec![2]).is_err());
    }
}
