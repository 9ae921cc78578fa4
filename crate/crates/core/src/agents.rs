//! Decomposed agents: a state representation, tabular policies over its
//! states, and a learning rule that picks the policy from the history so far.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environments::{parse_spec, Params};
use crate::error::{Error, Result};
use crate::history::{
    check_action, sample_index, ActionId, EnvironmentModel, History, ObservationId, RewardFn,
    PROB_SUM_TOL,
};

// ---------------------------------------------------------------------------
// State representation
// ---------------------------------------------------------------------------

/// `S : 𝓗 → 𝒮`, computed by a recurrent update from a start state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateRepresentation {
    /// A single state.
    Constant,
    /// The most recent observation; `start` before anything is observed.
    LastObservation { observation_count: usize, start: usize },
}

impl StateRepresentation {
    pub fn last_observation(observation_count: usize, start: usize) -> Result<Self> {
        if start >= observation_count {
            return Err(Error::StateOutOfRange { index: start, count: observation_count });
        }
        Ok(StateRepresentation::LastObservation { observation_count, start })
    }

    pub fn state_count(&self) -> usize {
        match self {
            StateRepresentation::Constant => 1,
            StateRepresentation::LastObservation { observation_count, .. } => *observation_count,
        }
    }

    pub fn start(&self) -> usize {
        match self {
            StateRepresentation::Constant => 0,
            StateRepresentation::LastObservation { start, .. } => *start,
        }
    }

    /// `u(s, a, o)`
    #[inline]
    pub fn update(&self, s: usize, _a: ActionId, o: ObservationId) -> usize {
        match self {
            StateRepresentation::Constant => s,
            StateRepresentation::LastObservation { .. } => o.index(),
        }
    }
}

pub fn represent_state(repr: &StateRepresentation, h: &History) -> usize {
    h.steps()
        .iter()
        .fold(repr.start(), |s, st| repr.update(s, st.action, st.observation))
}

// ---------------------------------------------------------------------------
// Tabular policies
// ---------------------------------------------------------------------------

/// Row-stochastic `state_count × action_count` matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyTable", into = "PolicyTable")]
pub struct TabularPolicy {
    state_count: usize,
    action_count: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyTable {
    probs: Vec<Vec<f64>>,
}

impl TryFrom<PolicyTable> for TabularPolicy {
    type Error = Error;

    fn try_from(t: PolicyTable) -> Result<Self> {
        TabularPolicy::from_rows(t.probs)
    }
}

impl From<TabularPolicy> for PolicyTable {
    fn from(p: TabularPolicy) -> Self {
        PolicyTable { probs: p.rows().map(<[f64]>::to_vec).collect() }
    }
}

impl fmt::Debug for TabularPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.rows()).finish()
    }
}

impl TabularPolicy {
    pub fn new(state_count: usize, action_count: usize, probs: Vec<f64>) -> Result<Self> {
        if state_count == 0 || action_count == 0 {
            return Err(Error::InvalidArgument("policy needs at least one state and action".into()));
        }
        if probs.len() != state_count * action_count {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {state_count}x{action_count}",
                probs.len()
            )));
        }
        let p = TabularPolicy { state_count, action_count, probs };
        for (s, row) in p.rows().enumerate() {
            validate_row(row).map_err(|m| Error::InvalidArgument(format!("policy row {s}: {m}")))?;
        }
        Ok(p)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let state_count = rows.len();
        let action_count = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != action_count) {
            return Err(Error::DimensionMismatch("ragged policy rows".into()));
        }
        TabularPolicy::new(state_count, action_count, rows.into_iter().flatten().collect())
    }

    pub fn uniform(state_count: usize, action_count: usize) -> Self {
        let p = 1.0 / action_count as f64;
        TabularPolicy { state_count, action_count, probs: vec![p; state_count * action_count] }
    }

    /// Plays `actions[s]` with probability 1 in state `s`.
    pub fn deterministic(action_count: usize, actions: &[ActionId]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * action_count];
        for (s, &a) in actions.iter().enumerate() {
            check_action(a, action_count)?;
            probs[s * action_count + a.index()] = 1.0;
        }
        TabularPolicy::new(actions.len(), action_count, probs)
    }

    /// The same row in every state.
    pub fn constant(state_count: usize, row: &[f64]) -> Result<Self> {
        TabularPolicy::new(state_count, row.len(), row.repeat(state_count))
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.action_count..(s + 1) * self.action_count]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.action_count)
    }

    #[inline]
    pub fn prob(&self, s: usize, a: ActionId) -> f64 {
        self.probs[s * self.action_count + a.index()]
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Copy with row `s` replaced.
    pub fn with_row(&self, s: usize, row: &[f64]) -> Result<Self> {
        if s >= self.state_count {
            return Err(Error::StateOutOfRange { index: s, count: self.state_count });
        }
        if row.len() != self.action_count {
            return Err(Error::DimensionMismatch(format!(
                "replacement row has {} actions, policy has {}",
                row.len(),
                self.action_count
            )));
        }
        validate_row(row).map_err(Error::InvalidArgument)?;
        let mut out = self.clone();
        out.probs[s * self.action_count..(s + 1) * self.action_count].copy_from_slice(row);
        Ok(out)
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s < self.state_count {
            Ok(())
        } else {
            Err(Error::StateOutOfRange { index: s, count: self.state_count })
        }
    }
}

pub(crate) fn validate_row(row: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = row.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(format!("invalid probability {x}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

pub fn action_probability(p: &TabularPolicy, s: usize, a: ActionId) -> Result<f64> {
    p.check_state(s)?;
    check_action(a, p.action_count)?;
    Ok(p.prob(s, a))
}

pub(crate) fn check_floor(c: f64, action_count: usize) -> Result<()> {
    if c > 0.0 && c * action_count as f64 <= 1.0 + 1e-12 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "softness floor {c} outside (0, 1/{action_count}]"
        )))
    }
}

/// Mixes a row towards uniform so every entry is at least `c`:
/// `(1 − c·|𝒜|)·p + c`. Rows that already meet the floor are returned as is,
/// which keeps the map idempotent.
pub(crate) fn soften_row(row: &mut [f64], c: f64) {
    if row.iter().all(|&x| x >= c) {
        return;
    }
    let keep = (1.0 - c * row.len() as f64).max(0.0);
    for x in row.iter_mut() {
        *x = keep * *x + c;
    }
}

pub fn enforce_softness(p: &TabularPolicy, c: f64) -> Result<TabularPolicy> {
    check_floor(c, p.action_count)?;
    let mut out = p.clone();
    for row in out.probs.chunks_exact_mut(p.action_count) {
        soften_row(row, c);
    }
    Ok(out)
}

/// Samples from row `s`, returning the action and its exact probability.
pub fn sample_action<R: Rng + ?Sized>(
    p: &TabularPolicy,
    s: usize,
    rng: &mut R,
) -> Result<(ActionId, f64)> {
    p.check_state(s)?;
    let row = p.row(s);
    let a = sample_index(row, rng.gen::<f64>());
    Ok((ActionId(a as u16), row[a]))
}

// ---------------------------------------------------------------------------
// Learning rules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RuleKind {
    /// Always the same policy.
    Fixed { policy: TabularPolicy },
    /// Tabular Q-learning, greedy policy mixed to the floor.
    QSoft { alpha: f64, discount: f64 },
    /// Q-learning whose values also decay each step towards `pessimism`.
    ForgetfulQ { alpha: f64, discount: f64, decay: f64, pessimism: f64 },
    /// Exponential weights on importance-weighted rewards rescaled to [0, 1].
    Exp3 { eta: f64 },
}

/// `σ`: a rule kind plus the softness floor `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRule {
    pub kind: RuleKind,
    pub c: f64,
}

impl LearningRule {
    pub fn fixed(policy: TabularPolicy, c: f64) -> Result<Self> {
        let policy = enforce_softness(&policy, c)?;
        Ok(LearningRule { kind: RuleKind::Fixed { policy }, c })
    }

    pub fn q_soft(alpha: f64, discount: f64, c: f64) -> Self {
        LearningRule { kind: RuleKind::QSoft { alpha, discount }, c }
    }

    pub fn forgetful_q(alpha: f64, discount: f64, decay: f64, pessimism: f64, c: f64) -> Self {
        LearningRule { kind: RuleKind::ForgetfulQ { alpha, discount, decay, pessimism }, c }
    }

    pub fn exp3(eta: f64, c: f64) -> Self {
        LearningRule { kind: RuleKind::Exp3 { eta }, c }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            RuleKind::Fixed { .. } => "fixed",
            RuleKind::QSoft { .. } => "q-soft",
            RuleKind::ForgetfulQ { .. } => "forgetful-q",
            RuleKind::Exp3 { .. } => "exp3",
        }
    }

    /// Whether the emitted policy never changes.
    pub fn is_stationary(&self) -> bool {
        matches!(self.kind, RuleKind::Fixed { .. })
    }

    fn validate(&self, state_count: usize, action_count: usize) -> Result<()> {
        check_floor(self.c, action_count)?;
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} {x} outside [0, 1]")))
            }
        };
        match &self.kind {
            RuleKind::Fixed { policy } => {
                if policy.state_count != state_count || policy.action_count != action_count {
                    return Err(Error::DimensionMismatch(format!(
                        "fixed policy is {}x{}, agent is {state_count}x{action_count}",
                        policy.state_count, policy.action_count
                    )));
                }
                if policy.min_prob() < self.c {
                    return Err(Error::InvalidArgument("fixed policy below softness floor".into()));
                }
            }
            RuleKind::QSoft { alpha, discount } => {
                unit("alpha", *alpha)?;
                unit("discount", *discount)?;
            }
            RuleKind::ForgetfulQ { alpha, discount, decay, pessimism } => {
                unit("alpha", *alpha)?;
                unit("discount", *discount)?;
                unit("decay", *decay)?;
                if !pessimism.is_finite() {
                    return Err(Error::InvalidArgument("pessimism must be finite".into()));
                }
            }
            RuleKind::Exp3 { eta } => {
                if !(eta.is_finite() && *eta > 0.0) {
                    return Err(Error::InvalidArgument(format!("eta {eta} must be positive")));
                }
            }
        }
        Ok(())
    }
}

/// Agent description: representation, learning rule and snapshot period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub repr: StateRepresentation,
    pub rule: LearningRule,
    pub snapshot_period: usize,
    pub action_count: usize,
}

impl AgentSpec {
    pub fn new(
        repr: StateRepresentation,
        rule: LearningRule,
        snapshot_period: usize,
        action_count: usize,
    ) -> Result<Self> {
        if snapshot_period == 0 {
            return Err(Error::InvalidArgument("snapshot period must be at least 1".into()));
        }
        rule.validate(repr.state_count(), action_count)?;
        Ok(AgentSpec { repr, rule, snapshot_period, action_count })
    }

    pub fn state_count(&self) -> usize {
        self.repr.state_count()
    }

    pub fn c(&self) -> f64 {
        self.rule.c
    }
}

#[derive(Debug, Clone)]
enum RuleState {
    Fixed,
    Values(Vec<f64>),
    LogWeights(Vec<f64>),
}

/// A running agent: the spec plus the learning rule's mutable state and the
/// current representation state.
#[derive(Debug, Clone)]
pub struct Agent {
    spec: AgentSpec,
    r_star: f64,
    state: usize,
    rule_state: RuleState,
}

impl Agent {
    /// `r_star` rescales rewards for rules that need them in [0, 1].
    pub fn new(spec: AgentSpec, r_star: f64) -> Self {
        let n = spec.state_count() * spec.action_count;
        let rule_state = match spec.rule.kind {
            RuleKind::Fixed { .. } => RuleState::Fixed,
            RuleKind::QSoft { .. } | RuleKind::ForgetfulQ { .. } => RuleState::Values(vec![0.0; n]),
            RuleKind::Exp3 { .. } => RuleState::LogWeights(vec![0.0; n]),
        };
        let state = spec.repr.start();
        Agent { spec, r_star, state, rule_state }
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Row `s` of the current policy `π_t`.
    pub fn policy_row(&self, s: usize, out: &mut [f64]) {
        let k = self.spec.action_count;
        let c = self.spec.rule.c;
        match (&self.spec.rule.kind, &self.rule_state) {
            (RuleKind::Fixed { policy }, _) => out.copy_from_slice(policy.row(s)),
            (_, RuleState::Values(q)) => {
                let row = &q[s * k..(s + 1) * k];
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties = row.iter().filter(|&&x| x == best).count() as f64;
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = if x == best { 1.0 / ties } else { 0.0 };
                }
                soften_row(out, c);
            }
            (_, RuleState::LogWeights(w)) => {
                let row = &w[s * k..(s + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = (x - m).exp();
                    z += *o;
                }
                let keep = (1.0 - c * k as f64).max(0.0);
                for o in out.iter_mut() {
                    *o = keep * (*o / z) + c;
                }
            }
            (_, RuleState::Fixed) => unreachable!("fixed state with learning kind"),
        }
    }

    /// The full current policy `π_t = σ(h_t)`.
    pub fn policy(&self) -> TabularPolicy {
        let k = self.spec.action_count;
        let ns = self.spec.state_count();
        if let RuleKind::Fixed { policy } = &self.spec.rule.kind {
            return policy.clone();
        }
        let mut probs = vec![0.0; ns * k];
        for (s, row) in probs.chunks_exact_mut(k).enumerate() {
            self.policy_row(s, row);
        }
        TabularPolicy { state_count: ns, action_count: k, probs }
    }

    /// Feeds one interaction step `(a, o)` with reward `r` and moves to the
    /// next representation state.
    pub fn observe(&mut self, a: ActionId, o: ObservationId, r: f64) {
        let k = self.spec.action_count;
        let s = self.state;
        let s2 = self.spec.repr.update(s, a, o);
        let idx = s * k + a.index();
        match (&self.spec.rule.kind, &mut self.rule_state) {
            (RuleKind::Fixed { .. }, _) => {}
            (RuleKind::QSoft { alpha, discount }, RuleState::Values(q)) => {
                let next = max_row(&q[s2 * k..(s2 + 1) * k]);
                q[idx] += alpha * (r + discount * next - q[idx]);
            }
            (RuleKind::ForgetfulQ { alpha, discount, decay, pessimism }, RuleState::Values(q)) => {
                for x in q.iter_mut() {
                    *x += decay * (pessimism - *x);
                }
                let next = max_row(&q[s2 * k..(s2 + 1) * k]);
                q[idx] += alpha * (r + discount * next - q[idx]);
            }
            (RuleKind::Exp3 { eta }, RuleState::LogWeights(_)) => {
                let mut row = vec![0.0; k];
                self.policy_row(s, &mut row);
                let scaled = if self.r_star > 0.0 { (r + self.r_star) / (2.0 * self.r_star) } else { 0.5 };
                let eta = *eta;
                if let RuleState::LogWeights(w) = &mut self.rule_state {
                    w[idx] += eta * scaled / row[a.index()];
                }
            }
            _ => unreachable!("rule state does not match rule kind"),
        }
        self.state = s2;
    }
}

fn max_row(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `σ(h)`: replays the learning rule over `h` from scratch.
pub fn select_policy(spec: &AgentSpec, reward_fn: &RewardFn, h: &History) -> TabularPolicy {
    let mut agent = Agent::new(spec.clone(), reward_fn.r_star());
    for st in h.steps() {
        agent.observe(st.action, st.observation, reward_fn.get(st.action, st.observation));
    }
    agent.policy()
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

pub const DEFAULT_SNAPSHOT_PERIOD: usize = 1000;

fn parse_row(raw: &str) -> Result<Vec<f64>> {
    raw.split('/')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Parse(format!("bad probability row {raw:?}")))
}

/// Builds an agent for `env` from a registry string. Common parameters:
/// `c` (floor, default `min(0.1, 1/|𝒜|)`), `K` (snapshot period, default
/// 1000), `repr` (`constant` or `last-obs`, default `constant`), `start`
/// (start state for `last-obs`). Kinds:
///
/// * `fixed[:policy=p0/p1/…]`, rows separated by `+`, a single row is used
///   in every state; default uniform
/// * `q-soft[:alpha=0.1,discount=0]`
/// * `forgetful-q[:alpha=0.01,discount=0,decay=0.01,pessimism=-20]`
/// * `exp3[:eta=0.01]`
pub fn make_agent(spec: &str, env: &EnvironmentModel) -> Result<AgentSpec> {
    let (name, map) = parse_spec(spec)?;
    let mut p = Params::new(spec, map);
    let k = env.action_count();
    let c: f64 = p.take("c")?.unwrap_or_else(|| 0.1f64.min(1.0 / k as f64));
    let period: usize = p.take("K")?.unwrap_or(DEFAULT_SNAPSHOT_PERIOD);
    let repr = match p.take_raw("repr").as_deref() {
        None | Some("constant") => StateRepresentation::Constant,
        Some("last-obs") => {
            StateRepresentation::last_observation(env.observation_count(), p.take("start")?.unwrap_or(0))?
        }
        Some(other) => return Err(Error::UnknownId(format!("state representation {other:?}"))),
    };
    let ns = repr.state_count();
    let rule = match name.as_str() {
        "fixed" => {
            let policy = match p.take_raw("policy") {
                None => TabularPolicy::uniform(ns, k),
                Some(raw) => {
                    let rows = raw.split('+').map(parse_row).collect::<Result<Vec<_>>>()?;
                    if rows.len() == 1 {
                        TabularPolicy::constant(ns, &rows[0])?
                    } else {
                        TabularPolicy::from_rows(rows)?
                    }
                }
            };
            LearningRule::fixed(policy, c)?
        }
        "q-soft" => LearningRule::q_soft(
            p.take("alpha")?.unwrap_or(0.1),
            p.take("discount")?.unwrap_or(0.0),
            c,
        ),
        "forgetful-q" => LearningRule::forgetful_q(
            p.take("alpha")?.unwrap_or(0.01),
            p.take("discount")?.unwrap_or(0.0),
            p.take("decay")?.unwrap_or(0.01),
            p.take("pessimism")?.unwrap_or(-20.0),
            c,
        ),
        "exp3" => LearningRule::exp3(p.take("eta")?.unwrap_or(0.01), c),
        other => return Err(Error::UnknownId(format!("agent {other:?}"))),
    };
    p.finish()?;
    AgentSpec::new(repr, rule, period, k)
}
