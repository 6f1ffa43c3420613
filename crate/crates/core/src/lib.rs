//! Counterfactual learning from logged bandit feedback.
//!
//! The crate bundles a small recommender simulator that emits organic views
//! and propensity-logged recommendations, six training objectives over the
//! logged data (likelihood, IPS likelihood, contextual bandit, dual bandit,
//! POEM, SNIPS), a full-batch L-BFGS minimizer, off-policy estimators, and an
//! experiment harness that A/B-tests learned policies inside the simulator.
//!
//! ```
//! use crmkit_core::sim::{Environment, SimConfig};
//! use crmkit_core::policy::PopularityPolicy;
//!
//! let env = Environment::new(SimConfig::default()).unwrap();
//! let log = env.generate_logs(3, &PopularityPolicy::default(), 7);
//! assert_eq!(log.bandit_count(), 3 * 80);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod harness;
pub mod log_io;
pub mod objectives;
pub mod ope;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod types;

pub use types::{Action, BanditEvent, Context, Event, InteractionLog, OrganicEvent};
