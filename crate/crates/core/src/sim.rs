//! A small recommender environment with organic sessions and logged bandit
//! feedback.
//!
//! The world is a low-rank model. Each item `j` has an organic embedding
//! `Γ_j` and a click embedding `Ψ_j` (both `K`-dimensional); each user draws a
//! latent `ω ~ N(0, I_K)`. Organic views are sampled from `softmax(Γω)` and a
//! recommendation of item `a` is clicked with probability
//! `σ(click_scale · Ψ_a·ω + click_offset)`.
//!
//! A user's timeline is one organic session of geometric length (mean
//! `organic_len_mean`) followed by `bandit_events_per_user` recommendation
//! slots, each preceded by one further organic view with probability 1/2.
//!
//! Randomness is split into per-user substreams keyed by a population seed:
//! latent and organic behaviour, action sampling, and click draws each get
//! their own stream. Two policies evaluated on the same population therefore
//! face identical users, contexts and click thresholds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::confidence_interval;
use crate::policy::{argmax, sample_categorical, sigmoid, softmax, Policy};
use crate::rng::{substream, Purpose};
use crate::types::{Action, BanditEvent, Context, Event, InteractionLog, OrganicEvent};

/// Calibrated so the popularity logging policy has a click-through rate of
/// about 1% under the default configuration (see `calibrate_click_offset`).
pub const DEFAULT_CLICK_OFFSET: f64 = -13.340655;
pub const DEFAULT_CLICK_SCALE: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("policy covers {policy} items, environment has {env}")]
    PolicyMismatch { policy: usize, env: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_items: usize,
    pub latent_dim: usize,
    pub organic_len_mean: f64,
    pub bandit_events_per_user: usize,
    pub click_scale: f64,
    pub click_offset: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_items: 10,
            latent_dim: 5,
            organic_len_mean: 20.0,
            bandit_events_per_user: 80,
            click_scale: DEFAULT_CLICK_SCALE,
            click_offset: DEFAULT_CLICK_OFFSET,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_items < 2 {
            return bad("n_items must be at least 2");
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be at least 1");
        }
        if self.bandit_events_per_user < 1 {
            return bad("bandit_events_per_user must be at least 1");
        }
        if !(self.organic_len_mean > 0.0 && self.organic_len_mean.is_finite()) {
            return bad("organic_len_mean must be positive");
        }
        if !(self.click_scale >= 0.0 && self.click_scale.is_finite()) {
            return bad("click_scale must be non-negative");
        }
        if !self.click_offset.is_finite() {
            return bad("click_offset must be finite");
        }
        Ok(())
    }
}

/// Who picks the action at a recommendation slot.
#[derive(Clone, Copy)]
pub enum Actor<'a> {
    Policy(&'a dyn Policy),
    /// Greedy on the true click model; sees the user's latent state.
    Oracle,
}

impl<'a, P: Policy> From<&'a P> for Actor<'a> {
    fn from(p: &'a P) -> Self {
        Actor::Policy(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbResult {
    pub ctr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub impressions: u64,
    pub clicks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub latent: Vec<f64>,
    pub organic_counts: Context,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    config: SimConfig,
    // row-major n × K
    organic_embeddings: Vec<f64>,
    click_embeddings: Vec<f64>,
}

enum Step {
    Organic { t: u64, item: usize },
    Slot { t: u64 },
}

/// Walks one user's timeline, yielding organic views and recommendation slots.
struct UserWalk<'e> {
    env: &'e Environment,
    rng: ChaCha8Rng,
    latent: Vec<f64>,
    organic_probs: Vec<f64>,
    counts: Context,
    t: u64,
    session_left: u64,
    slots_left: usize,
    pending_slot: bool,
}

impl<'e> UserWalk<'e> {
    fn new(env: &'e Environment, population_seed: u64, user_id: u64) -> Self {
        let cfg = &env.config;
        let mut rng = substream(population_seed, Purpose::UserOrganic, user_id);
        let latent: Vec<f64> = (0..cfg.latent_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let organic_scores: Vec<f64> = (0..cfg.n_items)
            .map(|j| dot(env.organic_row(j), &latent))
            .collect();
        let organic_probs = softmax(&organic_scores);
        let geometric =
            Geometric::new(1.0 / (1.0 + cfg.organic_len_mean)).expect("organic_len_mean validated");
        let session_left = geometric.sample(&mut rng);
        UserWalk {
            env,
            rng,
            latent,
            organic_probs,
            counts: Context::zeros(cfg.n_items),
            t: 0,
            session_left,
            slots_left: cfg.bandit_events_per_user,
            pending_slot: false,
        }
    }

    fn organic(&mut self) -> Step {
        let item = sample_categorical(&self.organic_probs, &mut self.rng);
        self.counts.bump(item);
        let t = self.t;
        self.t += 1;
        Step::Organic { t, item }
    }

    fn next_step(&mut self) -> Option<Step> {
        if self.session_left > 0 {
            self.session_left -= 1;
            return Some(self.organic());
        }
        if self.pending_slot {
            self.pending_slot = false;
            let t = self.t;
            self.t += 1;
            return Some(Step::Slot { t });
        }
        if self.slots_left == 0 {
            return None;
        }
        self.slots_left -= 1;
        if self.rng.random_bool(0.5) {
            self.pending_slot = true;
            return Some(self.organic());
        }
        let t = self.t;
        self.t += 1;
        Some(Step::Slot { t })
    }

    fn affinities(&self) -> Vec<f64> {
        (0..self.env.config.n_items)
            .map(|a| dot(self.env.click_row(a), &self.latent))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Environment {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let n = config.n_items;
        let k = config.latent_dim;
        let scale = 1.0 / (k as f64).sqrt();
        let mut rng = substream(config.seed, Purpose::Embeddings, 0);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let organic_embeddings = draw(n * k);
        let click_embeddings = draw(n * k);
        Ok(Environment {
            config,
            organic_embeddings,
            click_embeddings,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn n_items(&self) -> usize {
        self.config.n_items
    }

    pub fn organic_embeddings(&self) -> &[f64] {
        &self.organic_embeddings
    }

    pub fn click_embeddings(&self) -> &[f64] {
        &self.click_embeddings
    }

    fn organic_row(&self, j: usize) -> &[f64] {
        let k = self.config.latent_dim;
        &self.organic_embeddings[j * k..(j + 1) * k]
    }

    fn click_row(&self, j: usize) -> &[f64] {
        let k = self.config.latent_dim;
        &self.click_embeddings[j * k..(j + 1) * k]
    }

    /// Click probability of item `a` for a user with latent `latent`.
    pub fn click_prob(&self, latent: &[f64], a: usize) -> f64 {
        sigmoid(self.config.click_scale * dot(self.click_row(a), latent) + self.config.click_offset)
    }

    /// Latent state and full organic-session counts of a user, before any
    /// recommendation slot.
    pub fn user_state(&self, population_seed: u64, user_id: u64) -> UserState {
        let mut walk = UserWalk::new(self, population_seed, user_id);
        while walk.session_left > 0 {
            walk.session_left -= 1;
            walk.organic();
        }
        UserState {
            latent: walk.latent,
            organic_counts: walk.counts,
        }
    }

    fn check_actor(&self, actor: Actor<'_>) -> Result<(), SimError> {
        if let Actor::Policy(p) = actor {
            if p.n_items() != self.n_items() {
                return Err(SimError::PolicyMismatch {
                    policy: p.n_items(),
                    env: self.n_items(),
                });
            }
        }
        Ok(())
    }

    fn act(
        actor: Actor<'_>,
        context: &[f64],
        affinities: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> (Action, f64) {
        match actor {
            Actor::Policy(p) => {
                let probs = p.action_probs(context).expect("dimension checked");
                let a = sample_categorical(&probs, rng);
                (Action(a), probs[a])
            }
            Actor::Oracle => (Action(argmax(affinities)), 1.0),
        }
    }

    /// Full event sequence of one user, with `actor` choosing at every slot.
    pub fn simulate_user(
        &self,
        actor: Actor<'_>,
        user_id: u64,
        population_seed: u64,
    ) -> Result<Vec<Event>, SimError> {
        self.check_actor(actor)?;
        Ok(self.simulate_user_unchecked(actor, user_id, population_seed))
    }

    fn simulate_user_unchecked(
        &self,
        actor: Actor<'_>,
        user_id: u64,
        population_seed: u64,
    ) -> Vec<Event> {
        let mut walk = UserWalk::new(self, population_seed, user_id);
        let mut action_rng = substream(population_seed, Purpose::UserAction, user_id);
        let mut click_rng = substream(population_seed, Purpose::UserClick, user_id);
        let affinities = walk.affinities();
        let mut events = Vec::new();
        while let Some(step) = walk.next_step() {
            match step {
                Step::Organic { t, item } => {
                    events.push(Event::Organic(OrganicEvent { user_id, t, item }))
                }
                Step::Slot { t } => {
                    let context = walk.counts.to_f64();
                    let (action, propensity) =
                        Self::act(actor, &context, &affinities, &mut action_rng);
                    let u: f64 = click_rng.random();
                    let click = u8::from(u < self.click_prob(&walk.latent, action.0));
                    events.push(Event::Bandit(BanditEvent {
                        user_id,
                        t,
                        context: walk.counts.clone(),
                        action,
                        propensity,
                        click,
                    }));
                }
            }
        }
        events
    }

    /// Logs of users `0..num_users` under `logging_policy`. Users are simulated
    /// in parallel and merged in user order.
    pub fn generate_logs<P: Policy>(
        &self,
        num_users: u64,
        logging_policy: &P,
        population_seed: u64,
    ) -> InteractionLog {
        self.try_generate_logs(num_users, Actor::Policy(logging_policy), population_seed)
            .expect("logging policy must cover the environment's items")
    }

    pub fn try_generate_logs(
        &self,
        num_users: u64,
        actor: Actor<'_>,
        population_seed: u64,
    ) -> Result<InteractionLog, SimError> {
        self.check_actor(actor)?;
        let per_user: Vec<Vec<Event>> = (0..num_users)
            .into_par_iter()
            .map(|uid| self.simulate_user_unchecked(actor, uid, population_seed))
            .collect();
        let mut log = InteractionLog::new(self.n_items());
        log.events = per_user.into_iter().flatten().collect();
        Ok(log)
    }

    /// Expected click-through rate of `actor` over users `0..num_users` of the
    /// population, using the exact click probabilities instead of sampled
    /// clicks.
    pub fn true_ctr(
        &self,
        actor: Actor<'_>,
        num_users: u64,
        population_seed: u64,
    ) -> Result<f64, SimError> {
        self.check_actor(actor)?;
        let per_user: Vec<f64> = (0..num_users)
            .into_par_iter()
            .map(|uid| {
                let mut walk = UserWalk::new(self, population_seed, uid);
                let affinities = walk.affinities();
                let click_probs: Vec<f64> = (0..self.n_items())
                    .map(|a| self.click_prob(&walk.latent, a))
                    .collect();
                let mut total = 0.0;
                while let Some(step) = walk.next_step() {
                    if let Step::Slot { .. } = step {
                        total += match actor {
                            Actor::Policy(p) => {
                                let probs = p
                                    .action_probs(&walk.counts.to_f64())
                                    .expect("dimension checked");
                                dot(&probs, &click_probs)
                            }
                            Actor::Oracle => click_probs[argmax(&affinities)],
                        };
                    }
                }
                total
            })
            .collect();
        let slots = num_users as f64 * self.config.bandit_events_per_user as f64;
        Ok(per_user.iter().sum::<f64>() / slots)
    }

    /// Simulated A/B test: `actor` serves every slot of `num_users` fresh
    /// users; clicks are sampled.
    pub fn ab_test(
        &self,
        actor: Actor<'_>,
        num_users: u64,
        population_seed: u64,
    ) -> Result<AbResult, SimError> {
        self.check_actor(actor)?;
        if num_users == 0 {
            return Err(SimError::InvalidConfig(
                "A/B test needs at least one user".into(),
            ));
        }
        let (impressions, clicks) = (0..num_users)
            .into_par_iter()
            .map(|uid| {
                let mut walk = UserWalk::new(self, population_seed, uid);
                let mut action_rng = substream(population_seed, Purpose::UserAction, uid);
                let mut click_rng = substream(population_seed, Purpose::UserClick, uid);
                let affinities = walk.affinities();
                let (mut imp, mut clk) = (0u64, 0u64);
                while let Some(step) = walk.next_step() {
                    if let Step::Slot { .. } = step {
                        let context = walk.counts.to_f64();
                        let (a, _) = Self::act(actor, &context, &affinities, &mut action_rng);
                        let u: f64 = click_rng.random();
                        imp += 1;
                        clk += u64::from(u < self.click_prob(&walk.latent, a.0));
                    }
                }
                (imp, clk)
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let (ci_low, ci_high) =
            confidence_interval(clicks, impressions, 0.95).expect("impressions > 0");
        Ok(AbResult {
            ctr: clicks as f64 / impressions as f64,
            ci_low,
            ci_high,
            impressions,
            clicks,
        })
    }
}

/// Bisection on `click_offset` so that the true CTR of `policy` hits `target`.
pub fn calibrate_click_offset<P: Policy>(
    config: &SimConfig,
    policy: &P,
    target: f64,
    num_users: u64,
    population_seed: u64,
) -> Result<f64, SimError> {
    let ctr_at = |offset: f64| -> Result<f64, SimError> {
        let env = Environment::new(SimConfig {
            click_offset: offset,
            ..config.clone()
        })?;
        env.true_ctr(Actor::Policy(policy), num_users, population_seed)
    };
    let (mut lo, mut hi) = (-20.0, 5.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ctr_at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
