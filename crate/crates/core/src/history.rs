//! History-process primitives.
//!
//! An environment maps a finite history of `(action, observation)` pairs and a
//! new action to a distribution over the next observation. Rewards are a fixed
//! table over `(action, observation)`. Nothing here assumes the Markov property:
//! concrete environments compress the history into an [`EnvState`] only because
//! that is how they are computed efficiently, and [`EnvironmentModel::dynamics`]
//! still takes the full history.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationId(pub u16);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ObservationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

impl fmt::Display for ObservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.0)
    }
}

pub(crate) fn check_action(a: ActionId, count: usize) -> Result<()> {
    if a.index() < count {
        Ok(())
    } else {
        Err(Error::ActionOutOfRange { index: a.index(), count })
    }
}

pub(crate) fn check_observation(o: ObservationId, count: usize) -> Result<()> {
    if o.index() < count {
        Ok(())
    } else {
        Err(Error::ObservationOutOfRange { index: o.index(), count })
    }
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Step {
    pub action: ActionId,
    pub observation: ObservationId,
}

/// An append-only history.
///
/// Storage is a shared buffer plus a visible length, so extending a history
/// whose buffer already continues with the same step shares it, and extending
/// the sole owner of a buffer pushes in place. Otherwise the prefix is copied.
#[derive(Clone)]
pub struct History {
    buf: Arc<Vec<Step>>,
    len: usize,
    action_count: usize,
    observation_count: usize,
}

impl History {
    pub fn empty(action_count: usize, observation_count: usize) -> Self {
        History {
            buf: Arc::new(Vec::new()),
            len: 0,
            action_count,
            observation_count,
        }
    }

    pub fn from_steps(
        action_count: usize,
        observation_count: usize,
        steps: impl IntoIterator<Item = (ActionId, ObservationId)>,
    ) -> Result<Self> {
        let mut h = History::empty(action_count, observation_count);
        for (a, o) in steps {
            h = h.push(a, o)?;
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn observation_count(&self) -> usize {
        self.observation_count
    }

    pub fn steps(&self) -> &[Step] {
        &self.buf[..self.len]
    }

    pub fn last(&self) -> Option<Step> {
        self.steps().last().copied()
    }

    /// Returns `h · (a, o)`, leaving `self` untouched.
    pub fn append_step(&self, a: ActionId, o: ObservationId) -> Result<History> {
        self.clone().push(a, o)
    }

    /// Consuming append; O(1) when `self` owns its buffer.
    pub fn push(mut self, a: ActionId, o: ObservationId) -> Result<History> {
        check_action(a, self.action_count)?;
        check_observation(o, self.observation_count)?;
        let step = Step { action: a, observation: o };
        if self.buf.len() > self.len && self.buf[self.len] == step {
            self.len += 1;
            return Ok(self);
        }
        if self.buf.len() == self.len {
            if let Some(v) = Arc::get_mut(&mut self.buf) {
                v.push(step);
                self.len += 1;
                return Ok(self);
            }
        }
        let mut v = Vec::with_capacity(self.len + 1);
        v.extend_from_slice(self.steps());
        v.push(step);
        self.buf = Arc::new(v);
        self.len += 1;
        Ok(self)
    }

    /// `self · other`.
    pub fn concat(&self, other: &History) -> Result<History> {
        if other.action_count != self.action_count
            || other.observation_count != self.observation_count
        {
            return Err(Error::DimensionMismatch(
                "histories over different action/observation sets".into(),
            ));
        }
        let mut h = self.clone();
        for s in other.steps() {
            h = h.push(s.action, s.observation)?;
        }
        Ok(h)
    }

    pub fn prefix(&self, len: usize) -> History {
        History {
            buf: Arc::clone(&self.buf),
            len: len.min(self.len),
            action_count: self.action_count,
            observation_count: self.observation_count,
        }
    }
}

impl PartialEq for History {
    fn eq(&self, other: &Self) -> bool {
        self.action_count == other.action_count
            && self.observation_count == other.observation_count
            && self.steps() == other.steps()
    }
}

impl Eq for History {}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("⟨")?;
        for (i, s) in self.steps().iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "({},{})", s.action, s.observation)?;
        }
        f.write_str("⟩")
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Total reward table over `𝒜 × 𝒪`, row-major by action.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFn {
    action_count: usize,
    observation_count: usize,
    table: Vec<f64>,
    r_star: f64,
}

impl RewardFn {
    pub fn new(action_count: usize, observation_count: usize, table: Vec<f64>) -> Result<Self> {
        if action_count == 0 || observation_count == 0 {
            return Err(Error::InvalidArgument("reward table needs at least one action and observation".into()));
        }
        if table.len() != action_count * observation_count {
            return Err(Error::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                table.len(),
                action_count * observation_count
            )));
        }
        if let Some(bad) = table.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite reward {bad}")));
        }
        let r_star = table.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Ok(RewardFn { action_count, observation_count, table, r_star })
    }

    pub fn from_fn(
        action_count: usize,
        observation_count: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut table = Vec::with_capacity(action_count * observation_count);
        for a in 0..action_count {
            for o in 0..observation_count {
                table.push(f(a, o));
            }
        }
        RewardFn::new(action_count, observation_count, table)
    }

    pub fn reward(&self, a: ActionId, o: ObservationId) -> Result<f64> {
        check_action(a, self.action_count)?;
        check_observation(o, self.observation_count)?;
        Ok(self.get(a, o))
    }

    /// Unchecked lookup for indices already validated by the caller.
    #[inline]
    pub fn get(&self, a: ActionId, o: ObservationId) -> f64 {
        self.table[a.index() * self.observation_count + o.index()]
    }

    pub fn r_star(&self) -> f64 {
        self.r_star
    }

    pub fn is_zero(&self) -> bool {
        self.r_star == 0.0
    }
}

// ---------------------------------------------------------------------------
// Discounted returns
// ---------------------------------------------------------------------------

/// Evaluation horizon. `Infinite` is an explicit sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    pub fn finite(self) -> Option<usize> {
        match self {
            Horizon::Finite(h) => Some(h),
            Horizon::Infinite => None,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(h) => write!(f, "{h}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")))
    }
}

/// Discounted sum `Σ_{k < min(len, H)} γ^k r_k`, accumulated back to front.
///
/// With `Horizon::Infinite` the slice is taken to be the whole stream (the
/// caller has already truncated it or it is zero afterwards); use
/// [`RewardSequence`] when a closed-form tail is available.
pub fn discounted_return(rewards: &[f64], gamma: f64, horizon: Horizon) -> Result<f64> {
    check_gamma(gamma)?;
    let n = match horizon {
        Horizon::Finite(h) => h.min(rewards.len()),
        Horizon::Infinite => {
            if gamma >= 1.0 {
                return Err(Error::InfiniteHorizonUndiscounted(gamma));
            }
            rewards.len()
        }
    };
    Ok(horner(&rewards[..n], gamma, 0.0))
}

/// `r_0 + γ(r_1 + γ(… + γ(r_{n-1} + γ·tail)))`
#[inline]
pub(crate) fn horner(rewards: &[f64], gamma: f64, tail: f64) -> f64 {
    rewards.iter().rev().fold(tail, |acc, r| r + gamma * acc)
}

/// A reward stream that is either finite or eventually periodic.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSequence {
    Finite(Vec<f64>),
    EventuallyPeriodic { prefix: Vec<f64>, cycle: Vec<f64> },
}

impl RewardSequence {
    pub fn constant(r: f64) -> Self {
        RewardSequence::EventuallyPeriodic { prefix: Vec::new(), cycle: vec![r] }
    }

    /// The first `n` rewards.
    pub fn take(&self, n: usize) -> Vec<f64> {
        match self {
            RewardSequence::Finite(v) => v.iter().copied().take(n).collect(),
            RewardSequence::EventuallyPeriodic { prefix, cycle } => {
                let mut out: Vec<f64> = prefix.iter().copied().take(n).collect();
                if !cycle.is_empty() {
                    out.extend(cycle.iter().copied().cycle().take(n - out.len()));
                }
                out
            }
        }
    }

    /// Discounted return with an exact geometric tail for periodic streams.
    pub fn discounted_return(&self, gamma: f64, horizon: Horizon) -> Result<f64> {
        check_gamma(gamma)?;
        match (self, horizon) {
            (RewardSequence::Finite(v), h) => discounted_return(v, gamma, h),
            (RewardSequence::EventuallyPeriodic { .. }, Horizon::Finite(h)) => {
                Ok(horner(&self.take(h), gamma, 0.0))
            }
            (RewardSequence::EventuallyPeriodic { prefix, cycle }, Horizon::Infinite) => {
                if gamma >= 1.0 {
                    return Err(Error::InfiniteHorizonUndiscounted(gamma));
                }
                let period = cycle.len() as i32;
                let cycle_value = if period == 0 {
                    0.0
                } else {
                    horner(cycle, gamma, 0.0) / (1.0 - gamma.powi(period))
                };
                Ok(horner(prefix, gamma, cycle_value))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// Compressed view of a history used to evaluate dynamics incrementally.
///
/// `steps` is the history length; `key` is whatever finite summary the
/// environment keeps. Two histories with equal `EnvState` have identical
/// futures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState {
    pub steps: u64,
    pub key: u64,
}

/// Observation dynamics of a concrete environment.
///
/// Implementations must be pure: the same state and action always produce
/// the same distribution, and no internal randomness is allowed.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn initial(&self) -> EnvState;

    /// Writes `e(h, a)` into `out` (length = observation count) for the
    /// history summarised by `state`.
    fn observation_probs(&self, state: &EnvState, action: ActionId, out: &mut [f64]);

    fn advance(&self, state: &EnvState, action: ActionId, observation: ObservationId) -> EnvState;

    /// Whether dynamics ignore `EnvState::steps`.
    fn time_homogeneous(&self) -> bool {
        true
    }

    /// Whether `EnvState::key` ranges over a small finite set, so the state
    /// space reachable under a stationary policy can be enumerated.
    fn finite_summary(&self) -> bool {
        true
    }
}

/// An environment `e : 𝓗 × 𝒜 → Δ(𝒪)` together with its reward table.
#[derive(Debug, Clone)]
pub struct EnvironmentModel {
    name: String,
    action_count: usize,
    observation_count: usize,
    reward_fn: Arc<RewardFn>,
    dynamics: Arc<dyn Dynamics>,
    enumerable: bool,
    start: EnvState,
    prefix_len: usize,
}

impl EnvironmentModel {
    pub fn new(
        name: impl Into<String>,
        reward_fn: RewardFn,
        dynamics: Arc<dyn Dynamics>,
        enumerable: bool,
    ) -> Self {
        let start = dynamics.initial();
        EnvironmentModel {
            name: name.into(),
            action_count: reward_fn.action_count,
            observation_count: reward_fn.observation_count,
            reward_fn: Arc::new(reward_fn),
            dynamics,
            enumerable,
            start,
            prefix_len: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn observation_count(&self) -> usize {
        self.observation_count
    }

    pub fn reward_fn(&self) -> &RewardFn {
        &self.reward_fn
    }

    pub fn r_star(&self) -> f64 {
        self.reward_fn.r_star
    }

    pub fn enumerable(&self) -> bool {
        self.enumerable
    }

    pub fn time_homogeneous(&self) -> bool {
        self.dynamics.time_homogeneous()
    }

    pub fn finite_summary(&self) -> bool {
        self.dynamics.finite_summary()
    }

    /// Length of the history this environment is conditioned on (0 unless it
    /// was built by [`suffix_environment`]).
    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn empty_history(&self) -> History {
        History::empty(self.action_count, self.observation_count)
    }

    /// State corresponding to the empty history of this environment.
    pub fn start_state(&self) -> EnvState {
        self.start
    }

    pub fn observation_probs_into(&self, state: &EnvState, a: ActionId, out: &mut [f64]) {
        self.dynamics.observation_probs(state, a, out);
    }

    pub fn observation_probs(&self, state: &EnvState, a: ActionId) -> Vec<f64> {
        let mut out = vec![0.0; self.observation_count];
        self.dynamics.observation_probs(state, a, &mut out);
        out
    }

    pub fn advance(&self, state: &EnvState, a: ActionId, o: ObservationId) -> EnvState {
        self.dynamics.advance(state, a, o)
    }

    /// Summarises a full history of this environment.
    pub fn state_after(&self, h: &History) -> Result<EnvState> {
        self.check_history(h)?;
        Ok(h
            .steps()
            .iter()
            .fold(self.start, |s, st| self.dynamics.advance(&s, st.action, st.observation)))
    }

    /// `e(h, a)`: distribution over the next observation.
    pub fn dynamics(&self, h: &History, a: ActionId) -> Result<Vec<f64>> {
        check_action(a, self.action_count)?;
        let s = self.state_after(h)?;
        Ok(self.observation_probs(&s, a))
    }

    fn check_history(&self, h: &History) -> Result<()> {
        if h.action_count() != self.action_count || h.observation_count() != self.observation_count {
            return Err(Error::DimensionMismatch(format!(
                "history over {}x{} used with environment {} over {}x{}",
                h.action_count(),
                h.observation_count(),
                self.name,
                self.action_count,
                self.observation_count
            )));
        }
        Ok(())
    }
}

/// The world `e_h(h', a) ≡ e(h · h', a)` induced by a realised prefix.
pub fn suffix_environment(e: &EnvironmentModel, h: &History) -> Result<EnvironmentModel> {
    let start = e.state_after(h)?;
    let mut out = e.clone();
    out.start = start;
    out.prefix_len = e.prefix_len + h.len();
    out.name = format!("{}|h{}", e.name, out.prefix_len);
    Ok(out)
}

/// Samples an index from a probability vector given a uniform draw in `[0, 1)`.
///
/// Falls back to the last index with positive mass when rounding leaves `u`
/// past the cumulative sum.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
