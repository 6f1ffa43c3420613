//! Domain types shared across the crate: contexts, actions, logged events and
//! the per-user interaction log.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LogError {
    #[error("unknown user {0}")]
    UnknownUser(u64),
    #[error("event index {t} out of range for user {user_id} (timeline has {len} events)")]
    IndexOutOfRange { user_id: u64, t: u64, len: usize },
    #[error("invalid log: {0}")]
    Invalid(String),
}

/// Per-user organic view counts, one entry per item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(pub Vec<u32>);

impl Context {
    pub fn zeros(n_items: usize) -> Self {
        Context(vec![0; n_items])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| f64::from(c)).collect()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| u64::from(c)).sum()
    }

    pub(crate) fn bump(&mut self, item: usize) {
        self.0[item] += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

impl Action {
    pub fn id(self) -> usize {
        self.0
    }

    pub fn one_hot(self, n_items: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_items];
        v[self.0] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganicEvent {
    pub user_id: u64,
    pub t: u64,
    pub item: usize,
}

/// One logged recommendation. `context` is stored even though it can be
/// replayed from the user's organic history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEvent {
    pub user_id: u64,
    pub t: u64,
    pub context: Context,
    pub action: Action,
    pub propensity: f64,
    pub click: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    Organic(OrganicEvent),
    Bandit(BanditEvent),
}

impl Event {
    pub fn user_id(&self) -> u64 {
        match self {
            Event::Organic(e) => e.user_id,
            Event::Bandit(e) => e.user_id,
        }
    }

    pub fn t(&self) -> u64 {
        match self {
            Event::Organic(e) => e.t,
            Event::Bandit(e) => e.t,
        }
    }
}

/// Time-ordered events grouped by user. Each user's timeline uses one event
/// counter `t` shared by organic and bandit events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub n_items: usize,
    pub events: Vec<Event>,
}

impl InteractionLog {
    pub fn new(n_items: usize) -> Self {
        InteractionLog {
            n_items,
            events: Vec::new(),
        }
    }

    pub fn bandit_events(&self) -> impl Iterator<Item = &BanditEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Bandit(b) => Some(b),
            Event::Organic(_) => None,
        })
    }

    pub fn organic_events(&self) -> impl Iterator<Item = &OrganicEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Organic(o) => Some(o),
            Event::Bandit(_) => None,
        })
    }

    pub fn bandit_count(&self) -> usize {
        self.bandit_events().count()
    }

    pub fn organic_count(&self) -> usize {
        self.organic_events().count()
    }

    pub fn num_users(&self) -> usize {
        let mut users = 0;
        let mut last = None;
        for e in &self.events {
            if last != Some(e.user_id()) {
                users += 1;
                last = Some(e.user_id());
            }
        }
        users
    }

    pub fn empirical_ctr(&self) -> Option<f64> {
        let (n, clicks) = self
            .bandit_events()
            .fold((0usize, 0u64), |(n, c), b| (n + 1, c + u64::from(b.click)));
        (n > 0).then(|| clicks as f64 / n as f64)
    }

    fn user_events(&self, user_id: u64) -> Option<&[Event]> {
        let start = self.events.iter().position(|e| e.user_id() == user_id)?;
        let len = self.events[start..]
            .iter()
            .take_while(|e| e.user_id() == user_id)
            .count();
        Some(&self.events[start..start + len])
    }

    /// Counts of the user's organic views with event index strictly below `t`.
    ///
    /// `t` must be the index of one of the user's events, or one past the last.
    pub fn context_from_history(&self, user_id: u64, t: u64) -> Result<Context, LogError> {
        let events = self
            .user_events(user_id)
            .ok_or(LogError::UnknownUser(user_id))?;
        let last = events.last().map(Event::t).unwrap_or(0);
        if t > last + 1 || (t <= last && !events.iter().any(|e| e.t() == t)) {
            return Err(LogError::IndexOutOfRange {
                user_id,
                t,
                len: events.len(),
            });
        }
        let mut ctx = Context::zeros(self.n_items);
        for e in events.iter().take_while(|e| e.t() < t) {
            if let Event::Organic(o) = e {
                ctx.bump(o.item);
            }
        }
        Ok(ctx)
    }

    /// Replays every user's organic history in one pass and checks each stored
    /// bandit context against it. Returns the number of bandit events checked.
    pub fn verify_contexts(&self) -> Result<usize, LogError> {
        let mut checked = 0;
        let mut current: Option<(u64, Context)> = None;
        for e in &self.events {
            let uid = e.user_id();
            let ctx = match &mut current {
                Some((u, ctx)) if *u == uid => ctx,
                _ => {
                    current = Some((uid, Context::zeros(self.n_items)));
                    &mut current.as_mut().unwrap().1
                }
            };
            match e {
                Event::Organic(o) => ctx.bump(o.item),
                Event::Bandit(b) => {
                    if &b.context != ctx {
                        return Err(LogError::Invalid(format!(
                            "user {} t {}: stored context {:?} differs from replayed {:?}",
                            b.user_id, b.t, b.context.0, ctx.0
                        )));
                    }
                    checked += 1;
                }
            }
        }
        Ok(checked)
    }

    /// Structural checks: item/action bounds, context length, propensity in
    /// (0, 1], click in {0, 1}, contiguous users, strictly increasing `t`.
    pub fn validate(&self) -> Result<(), LogError> {
        let mut seen_users = std::collections::HashSet::new();
        let mut prev: Option<(u64, u64)> = None;
        for (i, e) in self.events.iter().enumerate() {
            validate_event(e, self.n_items)
                .map_err(|m| LogError::Invalid(format!("event {i}: {m}")))?;
            let (uid, t) = (e.user_id(), e.t());
            match prev {
                Some((pu, pt)) if pu == uid => {
                    if t <= pt {
                        return Err(LogError::Invalid(format!(
                            "event {i}: t={t} does not increase for user {uid} (previous {pt})"
                        )));
                    }
                }
                _ => {
                    if !seen_users.insert(uid) {
                        return Err(LogError::Invalid(format!(
                            "event {i}: user {uid} is not contiguous"
                        )));
                    }
                }
            }
            prev = Some((uid, t));
        }
        Ok(())
    }
}

/// Per-event field checks; returns a message naming the offending field.
pub(crate) fn validate_event(e: &Event, n_items: usize) -> Result<(), String> {
    match e {
        Event::Organic(o) => {
            if o.item >= n_items {
                return Err(format!(
                    "field `item`: {} not below n_items {}",
                    o.item, n_items
                ));
            }
        }
        Event::Bandit(b) => {
            if b.action.0 >= n_items {
                return Err(format!(
                    "field `action`: {} not below n_items {}",
                    b.action.0, n_items
                ));
            }
            if !(b.propensity > 0.0 && b.propensity <= 1.0) {
                return Err(format!(
                    "field `propensity`: {} outside (0, 1]",
                    b.propensity
                ));
            }
            if b.click > 1 {
                return Err(format!("field `click`: {} is not 0 or 1", b.click));
            }
            if b.context.len() != n_items {
                return Err(format!(
                    "field `context`: length {} differs from n_items {}",
                    b.context.len(),
                    n_items
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn organic(user_id: u64, t: u64, item: usize) -> Event {
        Event::Organic(OrganicEvent { user_id, t, item })
    }

    #[test]
    fn empty_history_gives_zero_context() {
        let log = InteractionLog {
            n_items: 3,
            events: vec![Event::Bandit(BanditEvent {
                user_id: 4,
                t: 0,
                context: Context::zeros(3),
                action: Action(1),
                propensity: 0.5,
                click: 0,
            })],
        };
        assert_eq!(
            log.context_from_history(4, 0).unwrap(),
            Context(vec![0, 0, 0])
        );
    }

    #[test]
    fn counts_prior_organic_views_only() {
        let log = InteractionLog {
            n_items: 3,
            events: vec![
                organic(0, 0, 1),
                organic(0, 1, 1),
                organic(0, 2, 0),
                organic(0, 3, 2),
            ],
        };
        assert_eq!(
            log.context_from_history(0, 3).unwrap(),
            Context(vec![1, 2, 0])
        );
        assert_eq!(
            log.context_from_history(0, 4).unwrap(),
            Context(vec![1, 2, 1])
        );
    }

    #[test]
    fn lookup_errors() {
        let log = InteractionLog {
            n_items: 2,
            events: vec![organic(0, 0, 1), organic(0, 2, 0)],
        };
        assert_eq!(
            log.context_from_history(9, 0),
            Err(LogError::UnknownUser(9))
        );
        assert!(matches!(
            log.context_from_history(0, 7),
            Err(LogError::IndexOutOfRange { .. })
        ));
        // t=1 is a gap in this timeline
        assert!(log.context_from_history(0, 1).is_err());
    }

    #[test]
    fn validate_rejects_non_increasing_t() {
        let log = InteractionLog {
            n_items: 2,
            events: vec![organic(0, 1, 1), organic(0, 1, 0)],
        };
        assert!(log.validate().is_err());
    }

    #[test]
    fn validate_rejects_split_user() {
        let log = InteractionLog {
            n_items: 2,
            events: vec![organic(0, 0, 1), organic(1, 0, 0), organic(0, 1, 0)],
        };
        assert!(log.validate().is_err());
    }

    #[test]
    fn one_hot_sums_to_one() {
        let v = Action(2).one_hot(4);
        assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
