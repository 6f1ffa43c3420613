//! Policies: distributions over actions given a context.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Action;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("context has length {got}, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Greedy,
    Stochastic,
}

pub trait Policy: Send + Sync {
    fn n_items(&self) -> usize;

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError>;

    fn log_action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok(self
            .action_probs(context)?
            .into_iter()
            .map(f64::ln)
            .collect())
    }

    /// Draws an action and returns it together with the probability the
    /// policy assigned to it, taken verbatim from `action_probs`.
    fn sample_action<R: Rng + ?Sized>(
        &self,
        context: &[f64],
        rng: &mut R,
    ) -> Result<(Action, f64), PolicyError>
    where
        Self: Sized,
    {
        let probs = self.action_probs(context)?;
        let a = sample_categorical(&probs, rng);
        Ok((Action(a), probs[a]))
    }
}

/// Inverse-CDF draw; a single uniform is consumed per call.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // u landed in the rounding slack above the final cumulative sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

fn check_dim(expected: usize, context: &[f64]) -> Result<(), PolicyError> {
    if context.len() != expected {
        return Err(PolicyError::DimensionMismatch {
            expected,
            got: context.len(),
        });
    }
    Ok(())
}

/// `scores[a] = Σ_j x_j · θ[j, a]` for row-major `θ` of shape n×n.
pub fn linear_scores(theta: &[f64], context: &[f64]) -> Vec<f64> {
    let n = context.len();
    let mut scores = vec![0.0; n];
    for (j, &x) in context.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &theta[j * n..(j + 1) * n];
        for (s, &w) in scores.iter_mut().zip(row) {
            *s += x * w;
        }
    }
    scores
}

pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    scores.iter().map(|&s| s - lse).collect()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn point_mass(n: usize, a: usize) -> Vec<f64> {
    let mut p = vec![0.0; n];
    p[a] = 1.0;
    p
}

/// Softmax policy over linear scores `xᵀθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxPolicy {
    n_items: usize,
    theta: Vec<f64>,
    pub mode: Mode,
}

impl LinearSoftmaxPolicy {
    pub fn new(n_items: usize, theta: Vec<f64>, mode: Mode) -> Result<Self, PolicyError> {
        if theta.len() != n_items * n_items {
            return Err(PolicyError::Invalid(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                n_items * n_items
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Invalid("theta has non-finite entries".into()));
        }
        Ok(LinearSoftmaxPolicy {
            n_items,
            theta,
            mode,
        })
    }

    pub fn zeros(n_items: usize, mode: Mode) -> Self {
        LinearSoftmaxPolicy {
            n_items,
            theta: vec![0.0; n_items * n_items],
            mode,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn greedy_action(&self, context: &[f64]) -> Result<Action, PolicyError> {
        check_dim(self.n_items, context)?;
        Ok(Action(argmax(&linear_scores(&self.theta, context))))
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        let scores = linear_scores(&self.theta, context);
        Ok(match self.mode {
            Mode::Stochastic => softmax(&scores),
            Mode::Greedy => point_mass(self.n_items, argmax(&scores)),
        })
    }

    fn log_action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        let scores = linear_scores(&self.theta, context);
        Ok(match self.mode {
            Mode::Stochastic => log_softmax(&scores),
            Mode::Greedy => point_mass(self.n_items, argmax(&scores))
                .into_iter()
                .map(f64::ln)
                .collect(),
        })
    }
}

/// Logistic click model `P(c=1 | x, a) = σ((x ⊗ a)ᵀβ)`; acts greedily on the
/// predicted click probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CtrModelPolicy {
    n_items: usize,
    beta: Vec<f64>,
}

impl CtrModelPolicy {
    pub fn new(n_items: usize, beta: Vec<f64>) -> Result<Self, PolicyError> {
        if beta.len() != n_items * n_items {
            return Err(PolicyError::Invalid(format!(
                "beta has {} entries, expected {}",
                beta.len(),
                n_items * n_items
            )));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Invalid("beta has non-finite entries".into()));
        }
        Ok(CtrModelPolicy { n_items, beta })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn click_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        Ok(linear_scores(&self.beta, context)
            .into_iter()
            .map(sigmoid)
            .collect())
    }
}

impl Policy for CtrModelPolicy {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        // σ is monotone, so the argmax over logits is the argmax over CTR
        let a = argmax(&linear_scores(&self.beta, context));
        Ok(point_mass(self.n_items, a))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-user popularity: probabilities proportional to the user's own organic
/// counts plus `smoothing`, so every action keeps positive probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityPolicy {
    n_items: usize,
    smoothing: f64,
}

impl PopularityPolicy {
    pub fn new(n_items: usize, smoothing: f64) -> Result<Self, PolicyError> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(PolicyError::Invalid(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        Ok(PopularityPolicy { n_items, smoothing })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }
}

impl Default for PopularityPolicy {
    fn default() -> Self {
        PopularityPolicy {
            n_items: 10,
            smoothing: 1.0,
        }
    }
}

impl Policy for PopularityPolicy {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        let total: f64 = context.iter().map(|&c| c + self.smoothing).sum();
        Ok(context
            .iter()
            .map(|&c| (c + self.smoothing) / total)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformPolicy {
    n_items: usize,
}

impl UniformPolicy {
    pub fn new(n_items: usize) -> Self {
        UniformPolicy { n_items }
    }
}

impl Policy for UniformPolicy {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        check_dim(self.n_items, context)?;
        Ok(vec![1.0 / self.n_items as f64; self.n_items])
    }
}

/// Serialized policy file: `{"kind": ..., "n_items": n, "theta" | "beta": [...], "mode": ...}`
/// with parameter matrices stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyFile {
    LinearSoftmax {
        n_items: usize,
        theta: Vec<f64>,
        mode: Mode,
    },
    CtrModel {
        n_items: usize,
        beta: Vec<f64>,
    },
    Popularity {
        n_items: usize,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    Uniform {
        n_items: usize,
    },
}

fn default_smoothing() -> f64 {
    1.0
}

/// Any of the concrete policies, behind one type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy {
    LinearSoftmax(LinearSoftmaxPolicy),
    CtrModel(CtrModelPolicy),
    Popularity(PopularityPolicy),
    Uniform(UniformPolicy),
}

impl AnyPolicy {
    pub fn to_file(&self) -> PolicyFile {
        match self {
            AnyPolicy::LinearSoftmax(p) => PolicyFile::LinearSoftmax {
                n_items: p.n_items,
                theta: p.theta.clone(),
                mode: p.mode,
            },
            AnyPolicy::CtrModel(p) => PolicyFile::CtrModel {
                n_items: p.n_items,
                beta: p.beta.clone(),
            },
            AnyPolicy::Popularity(p) => PolicyFile::Popularity {
                n_items: p.n_items,
                smoothing: p.smoothing,
            },
            AnyPolicy::Uniform(p) => PolicyFile::Uniform { n_items: p.n_items },
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self, PolicyError> {
        Ok(match file {
            PolicyFile::LinearSoftmax {
                n_items,
                theta,
                mode,
            } => AnyPolicy::LinearSoftmax(LinearSoftmaxPolicy::new(n_items, theta, mode)?),
            PolicyFile::CtrModel { n_items, beta } => {
                AnyPolicy::CtrModel(CtrModelPolicy::new(n_items, beta)?)
            }
            PolicyFile::Popularity { n_items, smoothing } => {
                AnyPolicy::Popularity(PopularityPolicy::new(n_items, smoothing)?)
            }
            PolicyFile::Uniform { n_items } => AnyPolicy::Uniform(UniformPolicy::new(n_items)),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| PolicyError::Invalid(e.to_string()))?;
        Self::from_file(file)
    }

    fn inner(&self) -> &dyn DynPolicy {
        match self {
            AnyPolicy::LinearSoftmax(p) => p,
            AnyPolicy::CtrModel(p) => p,
            AnyPolicy::Popularity(p) => p,
            AnyPolicy::Uniform(p) => p,
        }
    }
}

// Object-safe subset of `Policy` for dispatch.
trait DynPolicy {
    fn n(&self) -> usize;
    fn probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError>;
    fn log_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError>;
}

impl<P: Policy> DynPolicy for P {
    fn n(&self) -> usize {
        self.n_items()
    }
    fn probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.action_probs(context)
    }
    fn log_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.log_action_probs(context)
    }
}

impl Policy for AnyPolicy {
    fn n_items(&self) -> usize {
        self.inner().n()
    }

    fn action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.inner().probs(context)
    }

    fn log_action_probs(&self, context: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.inner().log_probs(context)
    }
}

impl From<LinearSoftmaxPolicy> for AnyPolicy {
    fn from(p: LinearSoftmaxPolicy) -> Self {
        AnyPolicy::LinearSoftmax(p)
    }
}

impl From<CtrModelPolicy> for AnyPolicy {
    fn from(p: CtrModelPolicy) -> Self {
        AnyPolicy::CtrModel(p)
    }
}

impl From<PopularityPolicy> for AnyPolicy {
    fn from(p: PopularityPolicy) -> Self {
        AnyPolicy::Popularity(p)
    }
}

impl From<UniformPolicy> for AnyPolicy {
    fn from(p: UniformPolicy) -> Self {
        AnyPolicy::Uniform(p)
    }
}
