//! Exact expectations by enumerating the action/observation tree.
//!
//! Stationary policies (a fixed agent, or any constant deviation) are
//! evaluated with memoisation on `(depth, environment summary, agent state)`,
//! and for infinite horizons on time-homogeneous environments by solving the
//! linear system of the induced chain. Learning agents are walked node by
//! node with their rule state cloned along each branch.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::agents::{Agent, AgentSpec, StateRepresentation, TabularPolicy};
use crate::deviations::Deviation;
use crate::error::{Error, Result};
use crate::history::{check_gamma, ActionId, EnvState, EnvironmentModel, History, Horizon, ObservationId};
use crate::transcript::Transcript;

pub const DEPTH_GUARD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailMode {
    /// Rewards past `max_depth` are dropped and reported as an interval.
    Zero,
    /// Exact value of the tail where the induced chain is closed-form,
    /// otherwise as `Zero`.
    AnalyticGeometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleConfig {
    pub max_depth: usize,
    pub tail: TailMode,
}

impl OracleConfig {
    pub fn new(max_depth: usize, tail: TailMode) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::InvalidArgument("oracle depth must be at least 1".into()));
        }
        if max_depth > DEPTH_GUARD {
            return Err(Error::DepthGuard { depth: max_depth, guard: DEPTH_GUARD });
        }
        Ok(OracleConfig { max_depth, tail })
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { max_depth: DEPTH_GUARD, tail: TailMode::AnalyticGeometric }
    }
}

/// An exact value, or the midpoint of an interval of half-width
/// `half_width` when a tail could not be evaluated in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub half_width: f64,
}

impl OracleValue {
    pub fn exact(value: f64) -> Self {
        OracleValue { value, half_width: 0.0 }
    }

    pub fn is_exact(&self) -> bool {
        self.half_width == 0.0
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.half_width
    }
}

/// The policy-generating rule whose expectation is taken.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    Agent(&'a AgentSpec),
    Policy { policy: &'a TabularPolicy, repr: &'a StateRepresentation },
}

impl<'a> Behavior<'a> {
    fn repr(&self) -> &'a StateRepresentation {
        match self {
            Behavior::Agent(spec) => &spec.repr,
            Behavior::Policy { repr, .. } => repr,
        }
    }

    fn stationary_policy(&self) -> Option<&'a TabularPolicy> {
        match self {
            Behavior::Agent(spec) => match &spec.rule.kind {
                crate::agents::RuleKind::Fixed { policy } => Some(policy),
                _ => None,
            },
            Behavior::Policy { policy, .. } => Some(policy),
        }
    }

    fn check(&self, env: &EnvironmentModel) -> Result<()> {
        let k = match self {
            Behavior::Agent(spec) => spec.action_count,
            Behavior::Policy { policy, repr } => {
                if policy.state_count() != repr.state_count() {
                    return Err(Error::DimensionMismatch(format!(
                        "policy has {} states, representation has {}",
                        policy.state_count(),
                        repr.state_count()
                    )));
                }
                policy.action_count()
            }
        };
        if k != env.action_count() {
            return Err(Error::DimensionMismatch(format!(
                "behavior has {k} actions, environment {} has {}",
                env.name(),
                env.action_count()
            )));
        }
        if let StateRepresentation::LastObservation { observation_count, .. } = self.repr() {
            if *observation_count != env.observation_count() {
                return Err(Error::DimensionMismatch("representation observation count differs".into()));
            }
        }
        Ok(())
    }
}

/// What is actually rolled out at each node: either a fixed table or a
/// learning agent, optionally with a per-node deviation applied.
enum Plan<'a> {
    Stationary(TabularPolicy),
    Learning { dev: Option<&'a Deviation> },
}

fn plan<'a>(behavior: Behavior<'a>, dev: Option<&'a Deviation>) -> Result<Plan<'a>> {
    if let Some(d) = dev {
        if let Some(p) = d.constant_policy() {
            return Ok(Plan::Stationary(p.clone()));
        }
        if let Deviation::Checkpoint { id, policy: None } = d {
            return Err(Error::UnresolvedCheckpoint(*id));
        }
    }
    match behavior.stationary_policy() {
        Some(p) => Ok(Plan::Stationary(match dev {
            Some(d) => d.apply(p)?,
            None => p.clone(),
        })),
        None => match behavior {
            Behavior::Agent(_) => Ok(Plan::Learning {
                dev: dev.filter(|d| !matches!(d, Deviation::Identity)),
            }),
            Behavior::Policy { .. } => unreachable!("policy behavior is stationary"),
        },
    }
}

// ---------------------------------------------------------------------------
// Stationary evaluator
// ---------------------------------------------------------------------------

type Joint = (EnvState, usize);

struct Stationary<'a> {
    env: &'a EnvironmentModel,
    policy: &'a TabularPolicy,
    repr: &'a StateRepresentation,
    gamma: f64,
    memo: HashMap<(usize, Joint), f64>,
    infinite: HashMap<Joint, f64>,
    obs_buf: Vec<Vec<f64>>,
}

impl<'a> Stationary<'a> {
    fn new(env: &'a EnvironmentModel, policy: &'a TabularPolicy, repr: &'a StateRepresentation, gamma: f64) -> Self {
        Stationary { env, policy, repr, gamma, memo: HashMap::new(), infinite: HashMap::new(), obs_buf: Vec::new() }
    }

    fn norm(&self, es: EnvState) -> EnvState {
        if self.env.time_homogeneous() {
            EnvState { steps: 0, key: es.key }
        } else {
            es
        }
    }

    /// Expected discounted reward over `depth` steps, plus `tail(leaf)`
    /// discounted by `γ^depth` at the leaves.
    fn finite(&mut self, depth: usize, es: EnvState, s: usize, tail: &dyn Fn(&mut Self, EnvState, usize) -> f64) -> f64 {
        if depth == 0 {
            return tail(self, es, s);
        }
        let key = (depth, (self.norm(es), s));
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let k = self.env.action_count();
        let mut probs = self.obs_buf.pop().unwrap_or_default();
        probs.resize(self.env.observation_count(), 0.0);
        let mut total = 0.0;
        for a in 0..k {
            let pa = self.policy.prob(s, ActionId(a as u16));
            if pa == 0.0 {
                continue;
            }
            let a = ActionId(a as u16);
            self.env.observation_probs_into(&es, a, &mut probs);
            let support: Vec<(usize, f64)> =
                probs.iter().enumerate().filter(|(_, &q)| q > 0.0).map(|(o, &q)| (o, q)).collect();
            for (o, q) in support {
                let o = ObservationId(o as u16);
                let r = self.env.reward_fn().get(a, o);
                let child = self.finite(depth - 1, self.env.advance(&es, a, o), self.repr.update(s, a, o), tail);
                total += pa * q * (r + self.gamma * child);
            }
        }
        self.obs_buf.push(probs);
        self.memo.insert(key, total);
        total
    }

    /// Exact infinite-horizon value by a linear solve over the joint states
    /// reachable from `(es, s)`.
    fn infinite(&mut self, es: EnvState, s: usize) -> Result<f64> {
        let root = (self.norm(es), s);
        if let Some(&v) = self.infinite.get(&root) {
            return Ok(v);
        }
        let mut index: HashMap<Joint, usize> = HashMap::new();
        let mut order: Vec<Joint> = Vec::new();
        let mut queue = VecDeque::new();
        index.insert(root, 0);
        order.push(root);
        queue.push_back(root);
        let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
        let mut probs = vec![0.0; self.env.observation_count()];
        while let Some(node) = queue.pop_front() {
            let (es, s) = node;
            let mut reward = 0.0;
            let mut trans: Vec<(usize, f64)> = Vec::new();
            for a in 0..self.env.action_count() {
                let a = ActionId(a as u16);
                let pa = self.policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                self.env.observation_probs_into(&es, a, &mut probs);
                for (o, &q) in probs.iter().enumerate() {
                    if q == 0.0 {
                        continue;
                    }
                    let o = ObservationId(o as u16);
                    reward += pa * q * self.env.reward_fn().get(a, o);
                    let next = (self.norm(self.env.advance(&es, a, o)), self.repr.update(s, a, o));
                    let j = match index.get(&next) {
                        Some(&j) => j,
                        None => {
                            let j = order.len();
                            if j > 100_000 {
                                return Err(Error::NotEnumerable(format!(
                                    "{}: reachable state space too large for an exact tail",
                                    self.env.name()
                                )));
                            }
                            index.insert(next, j);
                            order.push(next);
                            queue.push_back(next);
                            j
                        }
                    };
                    trans.push((j, pa * q));
                }
            }
            rows.push((reward, trans));
        }
        let n = order.len();
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for (i, (reward, trans)) in rows.into_iter().enumerate() {
            rhs[i] = reward;
            for (j, p) in trans {
                m[(i, j)] -= self.gamma * p;
            }
        }
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidArgument("singular system in infinite-horizon tail".into()))?;
        for (i, node) in order.into_iter().enumerate() {
            self.infinite.insert(node, sol[i]);
        }
        Ok(self.infinite[&root])
    }
}

// ---------------------------------------------------------------------------
// Learning-agent tree walk
// ---------------------------------------------------------------------------

struct Walker<'a> {
    env: &'a EnvironmentModel,
    dev: Option<&'a Deviation>,
    gamma: f64,
}

impl Walker<'_> {
    fn value(&self, depth: usize, es: EnvState, agent: &Agent) -> f64 {
        if depth == 0 {
            return 0.0;
        }
        let k = self.env.action_count();
        let s = agent.state();
        let mut row = vec![0.0; k];
        agent.policy_row(s, &mut row);
        if let Some(Deviation::StateSwap { state, row: swap }) = self.dev {
            if *state == s {
                row.copy_from_slice(swap);
            }
        }
        let mut probs = vec![0.0; self.env.observation_count()];
        let mut total = 0.0;
        for (a, &pa) in row.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let a = ActionId(a as u16);
            self.env.observation_probs_into(&es, a, &mut probs);
            for (o, &q) in probs.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                let o = ObservationId(o as u16);
                let r = self.env.reward_fn().get(a, o);
                let mut child = agent.clone();
                child.observe(a, o, r);
                let v = self.value(depth - 1, self.env.advance(&es, a, o), &child);
                total += pa * q * (r + self.gamma * v);
            }
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Evaluator bound to one environment, behavior, deviation and horizon.
/// Reuses memo tables across queries, which makes per-step evaluation along
/// a transcript cheap for stationary policies.
pub struct Oracle<'a> {
    env: &'a EnvironmentModel,
    behavior: Behavior<'a>,
    plan: Plan<'a>,
    horizon: Horizon,
    gamma: f64,
    cfg: OracleConfig,
}

impl<'a> Oracle<'a> {
    pub fn new(
        env: &'a EnvironmentModel,
        behavior: Behavior<'a>,
        dev: Option<&'a Deviation>,
        horizon: Horizon,
        gamma: f64,
        cfg: OracleConfig,
    ) -> Result<Self> {
        if !env.enumerable() {
            return Err(Error::NotEnumerable(env.name().to_string()));
        }
        check_gamma(gamma)?;
        if horizon == Horizon::Infinite && gamma >= 1.0 {
            return Err(Error::InfiniteHorizonUndiscounted(gamma));
        }
        if let Horizon::Finite(h) = horizon {
            if h > cfg.max_depth {
                return Err(Error::DepthGuard { depth: h, guard: cfg.max_depth });
            }
        }
        behavior.check(env)?;
        if let Some(d) = dev {
            d.check_actions(env.action_count())?;
        }
        let plan = plan(behavior, dev)?;
        if let Plan::Stationary(p) = &plan {
            if p.state_count() != behavior.repr().state_count() {
                return Err(Error::DimensionMismatch(format!(
                    "policy has {} states, representation has {}",
                    p.state_count(),
                    behavior.repr().state_count()
                )));
            }
        }
        Ok(Oracle { env, behavior, plan, horizon, gamma, cfg })
    }

    /// Values at many `(environment state, agent)` nodes, sharing memo
    /// tables for stationary plans.
    fn values(&self, nodes: &[(EnvState, Agent)]) -> Result<Vec<OracleValue>> {
        match &self.plan {
            Plan::Stationary(policy) => {
                let repr = self.behavior.repr();
                let mut ev = Stationary::new(self.env, policy, repr, self.gamma);
                let closed_tail = self.cfg.tail == TailMode::AnalyticGeometric
                    && self.env.time_homogeneous()
                    && self.env.finite_summary();
                nodes
                    .iter()
                    .map(|(es, agent)| {
                        let s = agent.state();
                        match self.horizon {
                            Horizon::Finite(h) => Ok(OracleValue::exact(ev.finite(h, *es, s, &|_, _, _| 0.0))),
                            Horizon::Infinite if closed_tail => Ok(OracleValue::exact(ev.infinite(*es, s)?)),
                            Horizon::Infinite => Ok(self.truncated(ev.finite(self.cfg.max_depth, *es, s, &|_, _, _| 0.0))),
                        }
                    })
                    .collect()
            }
            Plan::Learning { dev, .. } => {
                let walker = Walker { env: self.env, dev: *dev, gamma: self.gamma };
                let depth = match self.horizon {
                    Horizon::Finite(h) => h,
                    Horizon::Infinite => self.cfg.max_depth,
                };
                Ok(nodes
                    .par_iter()
                    .map(|(es, agent)| {
                        let v = walker.value(depth, *es, agent);
                        match self.horizon {
                            Horizon::Finite(_) => OracleValue::exact(v),
                            Horizon::Infinite => self.truncated(v),
                        }
                    })
                    .collect())
            }
        }
    }

    fn truncated(&self, v: f64) -> OracleValue {
        let r = self.env.r_star();
        OracleValue { value: v, half_width: self.gamma.powi(self.cfg.max_depth as i32) * r / (1.0 - self.gamma) }
    }

    fn agent_at(&self, h: &History) -> Agent {
        let spec = match self.behavior {
            Behavior::Agent(spec) => spec.clone(),
            Behavior::Policy { policy, repr } => AgentSpec {
                repr: repr.clone(),
                rule: crate::agents::LearningRule {
                    kind: crate::agents::RuleKind::Fixed { policy: policy.clone() },
                    c: policy.min_prob().max(f64::MIN_POSITIVE),
                },
                snapshot_period: 1,
                action_count: policy.action_count(),
            },
        };
        let mut agent = Agent::new(spec, self.env.r_star());
        for st in h.steps() {
            agent.observe(st.action, st.observation, self.env.reward_fn().get(st.action, st.observation));
        }
        agent
    }

    /// Value after the realised prefix `h` of this environment.
    pub fn value_after(&self, h: &History) -> Result<OracleValue> {
        let es = self.env.state_after(h)?;
        Ok(self.values(&[(es, self.agent_at(h))])?[0])
    }
}

/// `E[Σ γ^{i−t} R_i | σ, h]` over `horizon` steps.
pub fn exact_return(
    env: &EnvironmentModel,
    behavior: Behavior<'_>,
    h: &History,
    horizon: Horizon,
    gamma: f64,
    cfg: &OracleConfig,
) -> Result<OracleValue> {
    Oracle::new(env, behavior, None, horizon, gamma, *cfg)?.value_after(h)
}

/// Same expectation with `φ(σ(·))` acting at every node.
pub fn exact_deviation_return(
    env: &EnvironmentModel,
    behavior: Behavior<'_>,
    d: &Deviation,
    h: &History,
    horizon: Horizon,
    gamma: f64,
    cfg: &OracleConfig,
) -> Result<OracleValue> {
    Oracle::new(env, behavior, Some(d), horizon, gamma, *cfg)?.value_after(h)
}

/// Per-step `(deviation return, agent return)` conditioned on each realised
/// prefix `H_{t−1}` of the transcript.
pub fn exact_rho_terms(
    tr: &Transcript,
    env: &EnvironmentModel,
    behavior: Behavior<'_>,
    d: &Deviation,
    horizon: Horizon,
    gamma: f64,
    cfg: &OracleConfig,
) -> Result<Vec<(OracleValue, OracleValue)>> {
    tr.check_against(env)?;
    if tr.is_empty() {
        return Err(Error::InsufficientData { available: 0, required: 1 });
    }
    let agent_oracle = Oracle::new(env, behavior, None, horizon, gamma, *cfg)?;
    let dev_oracle = Oracle::new(env, behavior, Some(d), horizon, gamma, *cfg)?;
    let mut nodes = Vec::with_capacity(tr.len());
    let mut es = env.start_state();
    let mut agent = agent_oracle.agent_at(&env.empty_history());
    for rec in &tr.steps {
        if agent.state() != rec.state {
            return Err(Error::Mismatch(format!(
                "step {}: recorded agent state {} but replay gives {}",
                rec.t,
                rec.state,
                agent.state()
            )));
        }
        nodes.push((es, agent.clone()));
        agent.observe(rec.action, rec.obs, rec.reward);
        es = env.advance(&es, rec.action, rec.obs);
    }
    let dev = dev_oracle.values(&nodes)?;
    let base = agent_oracle.values(&nodes)?;
    Ok(dev.into_iter().zip(base).collect())
}

/// `ρ_T = (1/T) Σ_t (deviation return − agent return)`.
pub fn exact_rho(
    tr: &Transcript,
    env: &EnvironmentModel,
    behavior: Behavior<'_>,
    d: &Deviation,
    horizon: Horizon,
    gamma: f64,
    cfg: &OracleConfig,
) -> Result<OracleValue> {
    let terms = exact_rho_terms(tr, env, behavior, d, horizon, gamma, cfg)?;
    let n = terms.len() as f64;
    let mut value = 0.0;
    let mut half = 0.0;
    for (dv, av) in &terms {
        value += dv.value - av.value;
        half += dv.half_width + av.half_width;
    }
    Ok(OracleValue { value: value / n, half_width: half / n })
}

/// Total probability of the branches at each depth `1..=depth` under the
/// deviated behavior. Every entry should be 1.
pub fn level_masses(
    env: &EnvironmentModel,
    behavior: Behavior<'_>,
    d: Option<&Deviation>,
    h: &History,
    depth: usize,
) -> Result<Vec<f64>> {
    if depth > DEPTH_GUARD {
        return Err(Error::DepthGuard { depth, guard: DEPTH_GUARD });
    }
    let oracle = Oracle::new(env, behavior, d, Horizon::Finite(depth), 1.0, OracleConfig::default())?;
    let mut masses = vec![0.0; depth];
    let es = env.state_after(h)?;
    let agent = oracle.agent_at(h);
    fn walk(
        o: &Oracle<'_>,
        level: usize,
        es: EnvState,
        agent: &Agent,
        mass: f64,
        out: &mut [f64],
    ) {
        if level == out.len() {
            return;
        }
        let k = o.env.action_count();
        let s = agent.state();
        let mut row = vec![0.0; k];
        match &o.plan {
            Plan::Stationary(p) => row.copy_from_slice(p.row(s)),
            Plan::Learning { dev, .. } => {
                agent.policy_row(s, &mut row);
                if let Some(Deviation::StateSwap { state, row: swap }) = dev {
                    if *state == s {
                        row.copy_from_slice(swap);
                    }
                }
            }
        }
        let mut probs = vec![0.0; o.env.observation_count()];
        for (a, &pa) in row.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let a = ActionId(a as u16);
            o.env.observation_probs_into(&es, a, &mut probs);
            for (ob, &q) in probs.iter().enumerate() {
                if q == 0.0 {
                    continue;
                }
                let ob = ObservationId(ob as u16);
                let m = mass * pa * q;
                out[level] += m;
                let mut child = agent.clone();
                child.observe(a, ob, o.env.reward_fn().get(a, ob));
                walk(o, level + 1, o.env.advance(&es, a, ob), &child, m, out);
            }
        }
    }
    walk(&oracle, 0, es, &agent, 1.0, &mut masses);
    Ok(masses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::make_agent;
    use crate::environments::{fork, make_fork, make_noncomm_chain, make_two_state, two_state};
    use crate::history::{discounted_return, RewardSequence};

    fn always(a: ActionId, k: usize, ns: usize) -> TabularPolicy {
        TabularPolicy::deterministic(k, &vec![a; ns]).unwrap()
    }

    fn stay_policy() -> TabularPolicy {
        always(two_state::STAY, 2, 1)
    }

    const CONST: StateRepresentation = StateRepresentation::Constant;

    #[test]
    fn two_state_reference_values() {
        let env = make_two_state();
        let p = stay_policy();
        let b = Behavior::Policy { policy: &p, repr: &CONST };
        let cfg = OracleConfig::default();
        let v = exact_return(&env, b, &env.empty_history(), Horizon::Infinite, 0.5, &cfg).unwrap();
        assert_eq!(v, OracleValue::exact(4.0));
        let h = History::from_steps(2, 2, [(two_state::SWITCH, two_state::STATE1)]).unwrap();
        let v = exact_return(&env, b, &h, Horizon::Infinite, 0.5, &cfg).unwrap();
        assert_eq!(v, OracleValue::exact(2.0));
    }

    #[test]
    fn deviation_return_depends_on_world() {
        let env = make_two_state();
        let agent = make_agent("fixed:policy=0.2/0.8,c=0.2", &env).unwrap();
        let d = Deviation::external("stay", stay_policy());
        let cfg = OracleConfig::default();
        let b = Behavior::Agent(&agent);
        let from2 = exact_deviation_return(&env, b, &d, &env.empty_history(), Horizon::Infinite, 0.5, &cfg).unwrap();
        assert_eq!(from2.value, 4.0);
        let h = History::from_steps(2, 2, [(two_state::SWITCH, two_state::STATE1)]).unwrap();
        let from1 = exact_deviation_return(&env, b, &d, &h, Horizon::Infinite, 0.5, &cfg).unwrap();
        assert_eq!(from1.value, 2.0);
        // learning agent: the constant deviation does not care
        let learner = make_agent("q-soft:c=0.2", &env).unwrap();
        let v = exact_deviation_return(&env, Behavior::Agent(&learner), &d, &h, Horizon::Infinite, 0.5, &cfg).unwrap();
        assert_eq!(v, OracleValue::exact(2.0));
    }

    #[test]
    fn identity_deviation_equals_agent_return() {
        let env = make_two_state();
        let cfg = OracleConfig::default();
        let h = History::from_steps(2, 2, [(two_state::STAY, two_state::STATE2)]).unwrap();
        for spec in ["fixed:policy=0.3/0.7,c=0.2", "q-soft:c=0.2,alpha=0.5", "exp3:c=0.1,eta=0.3"] {
            let agent = make_agent(spec, &env).unwrap();
            let b = Behavior::Agent(&agent);
            let a = exact_return(&env, b, &h, Horizon::Finite(6), 0.9, &cfg).unwrap();
            let d = exact_deviation_return(&env, b, &Deviation::Identity, &h, Horizon::Finite(6), 0.9, &cfg).unwrap();
            assert_eq!(a, d, "{spec}");
        }
    }

    #[test]
    fn zero_rewards_give_zero() {
        let env = make_noncomm_chain(3, &[0.0, 0.0, 0.0]).unwrap();
        let agent = make_agent("q-soft:c=0.3", &env).unwrap();
        let cfg = OracleConfig::default();
        for hz in [Horizon::Finite(7), Horizon::Infinite] {
            let v = exact_return(&env, Behavior::Agent(&agent), &env.empty_history(), hz, 0.5, &OracleConfig { max_depth: 8, ..cfg })
                .unwrap();
            assert_eq!(v.value, 0.0);
        }
    }

    #[test]
    fn deterministic_oracle_matches_simulation_bitwise() {
        let env = make_fork(5).unwrap();
        // state = last observation; respond to the opponent's next move
        let repr = StateRepresentation::last_observation(5, 0).unwrap();
        let acts = vec![fork::PAPER; 5];
        let p = TabularPolicy::deterministic(3, &acts).unwrap();
        let b = Behavior::Policy { policy: &p, repr: &repr };
        let cfg = OracleConfig::default();
        for gamma in [0.3, 0.5, 0.9, 1.0] {
            for h in [1, 5, 12] {
                let v = exact_return(&env, b, &env.empty_history(), Horizon::Finite(h), gamma, &cfg).unwrap();
                // simulate: action 1 at the fork goes RIGHT, then always PAPER
                let mut s = env.start_state();
                let mut state = repr.start();
                let mut rewards = Vec::new();
                for _ in 0..h {
                    let a = p.row(state).iter().position(|&x| x == 1.0).map(|i| ActionId(i as u16)).unwrap();
                    let probs = env.observation_probs(&s, a);
                    let o = ObservationId(probs.iter().position(|&x| x == 1.0).unwrap() as u16);
                    rewards.push(env.reward_fn().get(a, o));
                    s = env.advance(&s, a, o);
                    state = repr.update(state, a, o);
                }
                let sim = discounted_return(&rewards, gamma, Horizon::Finite(h)).unwrap();
                assert_eq!(v.value.to_bits(), sim.to_bits(), "gamma={gamma} h={h}");
            }
        }
    }

    #[test]
    fn analytic_tail_matches_closed_form() {
        let env = make_two_state();
        let cfg = OracleConfig::default();
        let p = always(two_state::SWITCH, 2, 1);
        let b = Behavior::Policy { policy: &p, repr: &CONST };
        let v = exact_return(&env, b, &env.empty_history(), Horizon::Infinite, 0.5, &cfg).unwrap();
        let closed = RewardSequence::constant(-10.0).discounted_return(0.5, Horizon::Infinite).unwrap();
        assert_eq!(v.value, closed);
        // soft mixture: agree with deep finite enumeration to within γ^20 r*/(1-γ)
        let soft = TabularPolicy::from_rows(vec![vec![0.8, 0.2]]).unwrap();
        let b = Behavior::Policy { policy: &soft, repr: &CONST };
        let inf = exact_return(&env, b, &env.empty_history(), Horizon::Infinite, 0.5, &cfg).unwrap().value;
        let fin = exact_return(&env, b, &env.empty_history(), Horizon::Finite(20), 0.5, &cfg).unwrap().value;
        assert!((inf - fin).abs() <= 0.5f64.powi(20) * 10.0 / 0.5 + 1e-12);
    }

    #[test]
    fn non_homogeneous_infinite_gives_interval() {
        let env = crate::environments::make_drifting_bandit(2, 3, 0).unwrap();
        let agent = make_agent("fixed:c=0.5", &env).unwrap();
        let cfg = OracleConfig::new(10, TailMode::AnalyticGeometric).unwrap();
        let v = exact_return(&env, Behavior::Agent(&agent), &env.empty_history(), Horizon::Infinite, 0.5, &cfg).unwrap();
        assert!(!v.is_exact());
        assert!((v.half_width - 0.5f64.powi(10) * 2.0).abs() < 1e-15);
    }

    #[test]
    fn guards_and_errors() {
        let env = make_two_state();
        let agent = make_agent("q-soft:c=0.2", &env).unwrap();
        assert!(matches!(OracleConfig::new(21, TailMode::Zero), Err(Error::DepthGuard { .. })));
        let cfg = OracleConfig::new(5, TailMode::Zero).unwrap();
        assert!(matches!(
            exact_return(&env, Behavior::Agent(&agent), &env.empty_history(), Horizon::Finite(6), 0.5, &cfg),
            Err(Error::DepthGuard { .. })
        ));
        assert!(exact_return(&env, Behavior::Agent(&agent), &env.empty_history(), Horizon::Infinite, 1.0, &cfg).is_err());
        let d = Deviation::checkpoint(0);
        assert!(matches!(
            exact_deviation_return(&env, Behavior::Agent(&agent), &d, &env.empty_history(), Horizon::Finite(2), 0.5, &cfg),
            Err(Error::UnresolvedCheckpoint(0))
        ));
        let wrong = make_fork(3).unwrap();
        assert!(exact_return(&wrong, Behavior::Agent(&agent), &wrong.empty_history(), Horizon::Finite(2), 0.5, &cfg).is_err());
    }

    #[test]
    fn masses_sum_to_one() {
        let env = crate::environments::make_drifting_bandit(3, 2, 4).unwrap();
        let agent = make_agent("q-soft:c=0.1,alpha=0.3", &env).unwrap();
        let swap = Deviation::swap_to_action(0, ActionId(1), 3).unwrap();
        for d in [None, Some(&swap)] {
            let m = level_masses(&env, Behavior::Agent(&agent), d, &env.empty_history(), 4).unwrap();
            for x in m {
                assert!((x - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn learning_swap_walk_matches_manual_expansion() {
        // bandit with one step: value is Σ_a π(a) E[R | a]
        let env = crate::environments::make_drifting_bandit(2, 100, 1).unwrap();
        let agent = make_agent("q-soft:c=0.25", &env).unwrap();
        let swap = Deviation::swap_to_action(0, ActionId(1), 2).unwrap();
        let cfg = OracleConfig::default();
        let v = exact_deviation_return(&env, Behavior::Agent(&agent), &swap, &env.empty_history(), Horizon::Finite(1), 0.5, &cfg)
            .unwrap();
        let probs = env.observation_probs(&env.start_state(), ActionId(1));
        let expected: f64 = probs
            .iter()
            .enumerate()
            .map(|(o, q)| q * env.reward_fn().get(ActionId(1), ObservationId(o as u16)))
            .sum();
        assert!((v.value - expected).abs() < 1e-15);
    }
}
