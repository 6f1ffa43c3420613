//! Off-policy estimates of a policy's click-through rate from logged data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;

use crate::objectives::TrainingSet;
use crate::policy::{Policy, PolicyError};
use crate::rng::{substream, Purpose};

const Z95: f64 = 1.959_963_984_540_054;

/// Effective sample size below this fraction of N marks a report unreliable.
pub const UNRELIABLE_ESS_FRACTION: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum OpeError {
    #[error("no logged samples")]
    Empty,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid estimator argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ips,
    Snips,
}

impl std::str::FromStr for Estimator {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ips" => Ok(Estimator::Ips),
            "snips" => Ok(Estimator::Snips),
            other => Err(OpeError::InvalidArgument(format!(
                "unknown estimator {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub method: Estimator,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub effective_sample_size: f64,
    pub max_weight: f64,
    pub n: usize,
    pub unreliable: bool,
}

/// Importance weights `π(a_i|x_i) / p0_i`, optionally clipped at `clip_m`.
pub fn importance_weights(
    data: &TrainingSet,
    policy: &dyn Policy,
    clip_m: Option<f64>,
) -> Result<Vec<f64>, OpeError> {
    (0..data.len())
        .map(|i| {
            let probs = policy.action_probs(data.context(i))?;
            let w = probs[data.action(i)] / data.propensity(i);
            Ok(match clip_m {
                Some(m) => w.min(m),
                None => w,
            })
        })
        .collect()
}

fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// `(1/N) Σ c_i w_i` with a normal-approximation 95% interval.
pub fn ips_estimate(
    data: &TrainingSet,
    policy: &dyn Policy,
    clip_m: Option<f64>,
) -> Result<OpeReport, OpeError> {
    if data.is_empty() {
        return Err(OpeError::Empty);
    }
    if let Some(m) = clip_m {
        if !(m > 0.0) {
            return Err(OpeError::InvalidArgument(format!(
                "clip_m must be positive, got {m}"
            )));
        }
    }
    let w = importance_weights(data, policy, clip_m)?;
    let n = data.len();
    let nf = n as f64;
    let u: Vec<f64> = w.iter().zip(data.clicks()).map(|(w, c)| w * c).collect();
    let estimate = u.iter().sum::<f64>() / nf;
    let std_error = if n > 1 {
        let var = u.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    let effective_sample_size = ess(&w);
    Ok(OpeReport {
        method: Estimator::Ips,
        estimate,
        std_error,
        ci_low: estimate - Z95 * std_error,
        ci_high: estimate + Z95 * std_error,
        effective_sample_size,
        max_weight: w.iter().cloned().fold(0.0, f64::max),
        n,
        unreliable: effective_sample_size < UNRELIABLE_ESS_FRACTION * nf,
    })
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Self-normalized IPS `Σ c_i w_i / Σ w_i` with a percentile-bootstrap 95%
/// interval (`bootstrap_reps` resamples, seeded).
pub fn snips_estimate(
    data: &TrainingSet,
    policy: &dyn Policy,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<OpeReport, OpeError> {
    if data.is_empty() {
        return Err(OpeError::Empty);
    }
    if bootstrap_reps == 0 {
        return Err(OpeError::InvalidArgument(
            "bootstrap_reps must be at least 1".into(),
        ));
    }
    let w = importance_weights(data, policy, None)?;
    let c = data.clicks();
    let n = data.len();
    let sum_w: f64 = w.iter().sum();
    let sum_cw: f64 = w.iter().zip(c).map(|(w, c)| w * c).sum();
    let estimate = ratio(sum_cw, sum_w).ok_or_else(|| {
        OpeError::InvalidArgument("policy puts zero mass on every logged action".into())
    })?;

    let mut reps: Vec<f64> = (0..bootstrap_reps as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Purpose::Bootstrap, b);
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                num += c[i] * w[i];
                den += w[i];
            }
            ratio(num, den)
        })
        .collect::<Vec<Option<f64>>>()
        .into_iter()
        .flatten()
        .collect();
    reps.sort_by(f64::total_cmp);
    let (ci_low, ci_high, std_error) = if reps.is_empty() {
        (estimate, estimate, 0.0)
    } else {
        let m = reps.iter().sum::<f64>() / reps.len() as f64;
        let sd = if reps.len() > 1 {
            (reps.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        (quantile(&reps, 0.025), quantile(&reps, 0.975), sd)
    };
    let effective_sample_size = ess(&w);
    Ok(OpeReport {
        method: Estimator::Snips,
        estimate,
        std_error,
        ci_low,
        ci_high,
        effective_sample_size,
        max_weight: w.iter().cloned().fold(0.0, f64::max),
        n,
        unreliable: effective_sample_size < UNRELIABLE_ESS_FRACTION * n as f64,
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LinearSoftmaxPolicy, Mode, PopularityPolicy, UniformPolicy};

    fn two_event_set() -> TrainingSet {
        TrainingSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0, 1],
            vec![0.5, 0.5],
            vec![1, 0],
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_ips() {
        // π picks action 0 always: (1·1/0.5 + 0·0/0.5)/2 = 1
        let theta = vec![1.0, 0.0, 1.0, 0.0];
        let p = LinearSoftmaxPolicy::new(2, theta, Mode::Greedy).unwrap();
        let r = ips_estimate(&two_event_set(), &p, None).unwrap();
        assert_eq!(r.estimate, 1.0);
    }

    #[test]
    fn logging_policy_recovers_mean_click() {
        let data = TrainingSet::new(
            3,
            vec![1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0, 1.0, 0.0],
            vec![0, 2, 1],
            vec![2.0 / 6.0, 1.0 / 3.0, 2.0 / 8.0],
            vec![1, 0, 1],
        )
        .unwrap();
        let pop = PopularityPolicy::new(3, 1.0).unwrap();
        let ips = ips_estimate(&data, &pop, None).unwrap();
        assert!((ips.estimate - 2.0 / 3.0).abs() < 1e-12);
        assert!((ips.effective_sample_size - 3.0).abs() < 1e-12);
        let snips = snips_estimate(&data, &pop, 200, 1).unwrap();
        assert!((snips.estimate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn snips_all_clicked() {
        let data = TrainingSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0, 1],
            vec![0.3, 0.9],
            vec![1, 1],
        )
        .unwrap();
        let r = snips_estimate(&data, &UniformPolicy::new(2), 100, 3).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.ci_low, 1.0);
        assert_eq!(r.ci_high, 1.0);
    }

    #[test]
    fn propensity_scaling() {
        let data = TrainingSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0],
            vec![0, 1, 1],
            vec![0.5, 0.25, 0.4],
            vec![1, 0, 1],
        )
        .unwrap();
        let scaled = data.with_scaled_propensities(0.5);
        let p = UniformPolicy::new(2);
        let a = snips_estimate(&data, &p, 50, 0).unwrap().estimate;
        let b = snips_estimate(&scaled, &p, 50, 0).unwrap().estimate;
        assert!((a - b).abs() < 1e-12);
        let ia = ips_estimate(&data, &p, None).unwrap().estimate;
        let ib = ips_estimate(&scaled, &p, None).unwrap().estimate;
        assert!((ib - 2.0 * ia).abs() < 1e-12);
    }

    #[test]
    fn empty_data_rejected() {
        let data = TrainingSet::new(2, vec![], vec![], vec![], vec![]).unwrap();
        assert_eq!(
            ips_estimate(&data, &UniformPolicy::new(2), None),
            Err(OpeError::Empty)
        );
        assert_eq!(
            snips_estimate(&data, &UniformPolicy::new(2), 10, 0),
            Err(OpeError::Empty)
        );
    }

    #[test]
    fn greedy_target_flags_low_ess() {
        // 300 samples logged uniformly over 100 actions, greedy target matches 2
        let n = 100;
        let mut ctx = Vec::new();
        let mut actions = Vec::new();
        for i in 0..300 {
            ctx.extend(std::iter::repeat_n(0.0, n));
            actions.push(if i < 2 { 0 } else { 1 + i % (n - 1) });
        }
        let data = TrainingSet::new(n, ctx, actions, vec![0.01; 300], vec![1; 300]).unwrap();
        let greedy = LinearSoftmaxPolicy::zeros(n, Mode::Greedy);
        let r = ips_estimate(&data, &greedy, None).unwrap();
        assert!((r.effective_sample_size - 2.0).abs() < 1e-9);
        assert!(r.unreliable);
        assert!(r.ci_low <= r.estimate && r.estimate <= r.ci_high);
    }

    #[test]
    fn unknown_estimator_name() {
        assert!("dr".parse::<Estimator>().is_err());
        assert_eq!("snips".parse::<Estimator>().unwrap(), Estimator::Snips);
    }
}
