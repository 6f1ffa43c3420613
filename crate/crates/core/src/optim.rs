//! Full-batch L-BFGS with a strong-Wolfe line search, and a central
//! finite-difference gradient used to check analytic gradients.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("oracle returned a non-finite value or gradient at the starting point")]
    NonFiniteStart,
    #[error("gradient has {got} entries, expected {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Tolerance on the infinity norm of the gradient.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            grad_tol: 1e-6,
            max_iters: 500,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(OptimError::InvalidConfig(format!(
                "need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.memory < 1 {
            return Err(OptimError::InvalidConfig(
                "memory must be at least 1".into(),
            ));
        }
        if self.max_line_search_steps < 1 {
            return Err(OptimError::InvalidConfig(
                "max_line_search_steps must be at least 1".into(),
            ));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(OptimError::InvalidConfig(
                "grad_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Start,
    StrongWolfe,
    /// Accepted by the backtracking fallback; only the sufficient-decrease
    /// condition is guaranteed.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub kind: StepKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

impl Minimum {
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "value", "grad_norm", "step", "kind"])?;
        for e in &self.trace {
            let kind = match e.kind {
                StepKind::Start => "start",
                StepKind::StrongWolfe => "strong_wolfe",
                StepKind::Backtracking => "backtracking",
            };
            w.write_record([
                e.iteration.to_string(),
                e.value.to_string(),
                e.grad_norm.to_string(),
                e.step.to_string(),
                kind.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn is_finite(value: f64, grad: &[f64]) -> bool {
    value.is_finite() && grad.iter().all(|g| g.is_finite())
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: Vec<f64>,
}

struct LineSearch<'a, F> {
    oracle: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Point {
        let xt: Vec<f64> = self
            .x
            .iter()
            .zip(self.dir)
            .map(|(x, d)| x + alpha * d)
            .collect();
        let (value, grad) = (self.oracle)(&xt);
        self.evals += 1;
        if !is_finite(value, &grad) {
            return Point {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                grad,
            };
        }
        let slope = dot(&grad, self.dir);
        Point {
            alpha,
            value,
            slope,
            grad,
        }
    }

    fn armijo(&self, p: &Point) -> bool {
        p.value <= self.f0 + self.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    /// Bracketing phase followed by `zoom`.
    fn strong_wolfe(&mut self, alpha0: f64) -> Option<Point> {
        let mut prev = Point {
            alpha: 0.0,
            value: self.f0,
            slope: self.slope0,
            grad: Vec::new(),
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.budget {
            let cur = self.eval(alpha);
            if !self.armijo(&cur) || (!first && cur.value >= prev.value) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = (2.0 * cur.alpha).min(1e10);
            prev = cur;
        }
        None
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Option<Point> {
        while self.evals < self.budget {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
                return None;
            }
            let alpha = interpolate(&lo, &hi);
            let cur = self.eval(alpha);
            if !self.armijo(&cur) || cur.value >= lo.value {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        None
    }

    fn backtrack(&mut self, alpha0: f64, steps: usize) -> Option<Point> {
        let mut alpha = alpha0;
        for _ in 0..steps {
            let cur = self.eval(alpha);
            if self.armijo(&cur) && cur.value < self.f0 {
                return Some(cur);
            }
            alpha *= 0.5;
        }
        None
    }
}

/// Cubic interpolation of the bracket, safeguarded to the inner 80% of the
/// interval; falls back to bisection.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !hi.value.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b - (b - a) * (hi.slope + d2 - d1) / denom;
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if !t.is_finite() || t < left + margin || t > right - margin {
        mid
    } else {
        t
    }
}

/// Minimizes `oracle` (returning value and gradient) starting from `x0`.
///
/// The returned point is the best iterate seen. Termination is by the
/// gradient tolerance, the iteration cap, or a line search that cannot make
/// progress; only the first counts as converged.
pub fn minimize<F>(mut oracle: F, x0: &[f64], config: &LbfgsConfig) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    config.validate()?;
    let dim = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = oracle(&x);
    if g.len() != dim {
        return Err(OptimError::GradientLength {
            expected: dim,
            got: g.len(),
        });
    }
    if !is_finite(f, &g) {
        return Err(OptimError::NonFiniteStart);
    }
    let mut evaluations = 1;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        value: f,
        grad_norm: norm_inf(&g),
        step: 0.0,
        kind: StepKind::Start,
    }];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;

    let termination = loop {
        if norm_inf(&g) <= config.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iters {
            break Termination::MaxIterations;
        }

        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / norm2(&g)).min(1.0)
        } else {
            1.0
        };

        let mut ls = LineSearch {
            oracle: &mut oracle,
            x: &x,
            dir: &dir,
            f0: f,
            slope0: slope,
            c1: config.wolfe_c1,
            c2: config.wolfe_c2,
            budget: config.max_line_search_steps,
            evals: 0,
        };
        let (point, kind) = match ls.strong_wolfe(alpha0) {
            Some(p) => (Some(p), StepKind::StrongWolfe),
            None => {
                ls.budget += config.max_line_search_steps;
                (
                    ls.backtrack(alpha0, config.max_line_search_steps),
                    StepKind::Backtracking,
                )
            }
        };
        evaluations += ls.evals;
        let Some(point) = point else {
            break Termination::LineSearchFailed(format!(
                "no acceptable step along the search direction at iteration {iterations}"
            ));
        };

        if kind == StepKind::StrongWolfe {
            debug_assert!(point.value <= f + config.wolfe_c1 * point.alpha * slope);
            debug_assert!(point.slope.abs() <= -config.wolfe_c2 * slope);
        }

        let s: Vec<f64> = dir.iter().map(|d| point.alpha * d).collect();
        let y: Vec<f64> = point.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = point.value;
        g = point.grad;
        iterations += 1;
        trace.push(TraceEntry {
            iteration: iterations,
            value: f,
            grad_norm: norm_inf(&g),
            step: point.alpha,
            kind,
        });
    };

    // every accepted step decreases f, so the current iterate is the best one
    let grad_norm = norm_inf(&g);
    Ok(Minimum {
        converged: termination == Termination::GradientTolerance,
        x,
        value: f,
        grad_norm,
        iterations,
        termination,
        evaluations,
        trace,
    })
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Central differences, one coordinate at a time.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut xt = x.to_vec();
    (0..x.len())
        .map(|i| {
            xt[i] = x[i] + step;
            let up = f(&xt);
            xt[i] = x[i] - step;
            let down = f(&xt);
            xt[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}
