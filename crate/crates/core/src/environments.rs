//! Built-in environments and the string registry used by the CLI.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::history::{ActionId, Dynamics, EnvState, EnvironmentModel, ObservationId, RewardFn};

// ---------------------------------------------------------------------------
// Two-state stay/switch MDP
// ---------------------------------------------------------------------------

pub mod two_state {
    use crate::history::{ActionId, ObservationId};

    pub const STAY: ActionId = ActionId(0);
    pub const SWITCH: ActionId = ActionId(1);
    pub const STATE1: ObservationId = ObservationId(0);
    pub const STATE2: ObservationId = ObservationId(1);
    pub const DEFAULT_GAMMA: f64 = 0.5;
}

#[derive(Debug)]
struct TwoStateDynamics;

impl Dynamics for TwoStateDynamics {
    fn initial(&self) -> EnvState {
        EnvState { steps: 0, key: two_state::STATE2.0 as u64 }
    }

    fn observation_probs(&self, state: &EnvState, action: ActionId, out: &mut [f64]) {
        let next = if action == two_state::SWITCH { 1 - state.key } else { state.key };
        out.fill(0.0);
        out[next as usize] = 1.0;
    }

    fn advance(&self, state: &EnvState, _action: ActionId, observation: ObservationId) -> EnvState {
        EnvState { steps: state.steps + 1, key: observation.0 as u64 }
    }
}

/// Two states, STAY keeps the state and SWITCH flips it. The observation is
/// the state entered. SWITCH pays −10; STAY pays +1 in state 1 and +2 in
/// state 2. Starts in state 2.
pub fn make_two_state() -> EnvironmentModel {
    let rewards = RewardFn::new(2, 2, vec![1.0, 2.0, -10.0, -10.0]).expect("static table");
    EnvironmentModel::new("two-state", rewards, Arc::new(TwoStateDynamics), true)
}

// ---------------------------------------------------------------------------
// LEFT/RIGHT fork
// ---------------------------------------------------------------------------

pub mod fork {
    use crate::history::{ActionId, ObservationId};

    pub const ROCK: ActionId = ActionId(0);
    pub const PAPER: ActionId = ActionId(1);
    pub const SCISSORS: ActionId = ActionId(2);
    /// At the fork, action 0 enters LEFT and any other action enters RIGHT.
    pub const LEFT: ActionId = ActionId(0);
    pub const RIGHT: ActionId = ActionId(1);

    pub const OPP_ROCK: ObservationId = ObservationId(0);
    pub const OPP_PAPER: ObservationId = ObservationId(1);
    pub const OPP_SCISSORS: ObservationId = ObservationId(2);
    pub const ENTER_LEFT: ObservationId = ObservationId(3);
    pub const ENTER_RIGHT: ObservationId = ObservationId(4);

    pub const DEFAULT_PERIOD: usize = 32;

    /// +1 if `mine` beats `theirs`, −1 if it loses, 0 on a draw.
    pub fn payoff(mine: usize, theirs: usize) -> f64 {
        match (3 + mine - theirs) % 3 {
            0 => 0.0,
            1 => 1.0,
            _ => -1.0,
        }
    }

    /// The move that beats `theirs`.
    pub fn best_response(theirs: usize) -> ActionId {
        ActionId(((theirs + 1) % 3) as u16)
    }
}

const FORK_AT_START: u64 = 0;
const FORK_IN_LEFT: u64 = 1;
const FORK_RIGHT_BASE: u64 = 2;

#[derive(Debug)]
struct ForkDynamics {
    pattern: Vec<u16>,
}

impl ForkDynamics {
    fn new(period: usize) -> Self {
        let mut x = 0x243f_6a88_85a3_08d3u64;
        let pattern = (0..period)
            .map(|_| {
                x = splitmix64(x);
                (x % 3) as u16
            })
            .collect();
        ForkDynamics { pattern }
    }
}

impl Dynamics for ForkDynamics {
    fn initial(&self) -> EnvState {
        EnvState { steps: 0, key: FORK_AT_START }
    }

    fn observation_probs(&self, state: &EnvState, action: ActionId, out: &mut [f64]) {
        out.fill(0.0);
        let o = match state.key {
            FORK_AT_START if action == fork::LEFT => fork::ENTER_LEFT,
            FORK_AT_START => fork::ENTER_RIGHT,
            FORK_IN_LEFT => fork::OPP_ROCK,
            k => ObservationId(self.pattern[(k - FORK_RIGHT_BASE) as usize]),
        };
        out[o.index()] = 1.0;
    }

    fn advance(&self, state: &EnvState, _action: ActionId, observation: ObservationId) -> EnvState {
        let key = match state.key {
            FORK_AT_START if observation == fork::ENTER_LEFT => FORK_IN_LEFT,
            FORK_AT_START => FORK_RIGHT_BASE,
            FORK_IN_LEFT => FORK_IN_LEFT,
            k => FORK_RIGHT_BASE + (k - FORK_RIGHT_BASE + 1) % self.pattern.len() as u64,
        };
        EnvState { steps: state.steps + 1, key }
    }
}

/// The first action picks a branch for good. LEFT plays repeated
/// rock-paper-scissors against an opponent that always throws rock; RIGHT
/// plays against an opponent that cycles a fixed pseudo-random pattern of
/// length `period`. The observation is the opponent's move; entering a branch
/// is observed as `ENTER_LEFT`/`ENTER_RIGHT` with reward 0.
pub fn make_fork(period: usize) -> Result<EnvironmentModel> {
    if period == 0 {
        return Err(Error::InvalidArgument("fork period must be at least 1".into()));
    }
    let rewards = RewardFn::from_fn(3, 5, |a, o| if o < 3 { fork::payoff(a, o) } else { 0.0 })?;
    let name = format!("fork:period={period}");
    Ok(EnvironmentModel::new(name, rewards, Arc::new(ForkDynamics::new(period)), true))
}

/// Opponent move in the RIGHT branch at its `i`-th round (0-based).
pub fn fork_right_pattern(period: usize) -> Vec<u16> {
    ForkDynamics::new(period.max(1)).pattern
}

// ---------------------------------------------------------------------------
// Drifting bandit
// ---------------------------------------------------------------------------

pub mod bandit {
    pub const BUCKETS: usize = 32;
    pub const NOISE: f64 = 0.1;
    pub const BEST_MEAN: f64 = 0.75;
    pub const WARM_MEAN: f64 = 0.35;
    pub const COLD_MEAN: f64 = -0.85;
    pub const DEFAULT_PERIOD: u64 = 5000;

    pub fn bucket_value(o: usize) -> f64 {
        -1.0 + 2.0 * o as f64 / (BUCKETS - 1) as f64
    }

    pub fn bucket_of(x: f64) -> usize {
        let i = ((x.clamp(-1.0, 1.0) + 1.0) * (BUCKETS - 1) as f64 / 2.0).round();
        i as usize
    }
}

/// Arm means follow a fixed rotation: in drift period `p = ⌊t / D⌋` the best
/// arm is `(b0 + p) mod k`. The initial best arm `b0` pays poorly whenever it
/// is not best, as do arms that have never been best; arms that were best
/// earlier keep a moderate mean. Each pull returns `mean ± 0.1` with equal
/// probability, quantised to one of 32 reward buckets on `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct DriftingBandit {
    pub k: usize,
    pub drift_period: u64,
    pub initial_best: usize,
}

impl DriftingBandit {
    pub fn best_arm(&self, t: u64) -> usize {
        let p = t / self.drift_period;
        (self.initial_best + (p % self.k as u64) as usize) % self.k
    }

    /// Nominal (pre-quantisation) mean of `arm` on the pull made after `t`
    /// steps.
    pub fn nominal_mean(&self, arm: usize, t: u64) -> f64 {
        let p = t / self.drift_period;
        if arm == self.best_arm(t) {
            return bandit::BEST_MEAN;
        }
        if arm == self.initial_best {
            return bandit::COLD_MEAN;
        }
        let offset = (arm + self.k - self.initial_best) % self.k;
        if (offset as u64) <= p {
            bandit::WARM_MEAN
        } else {
            bandit::COLD_MEAN
        }
    }

    fn buckets(&self, arm: usize, t: u64) -> (usize, usize) {
        let m = self.nominal_mean(arm, t);
        (bandit::bucket_of(m - bandit::NOISE), bandit::bucket_of(m + bandit::NOISE))
    }

    /// Expected reward of `arm` after quantisation.
    pub fn mean(&self, arm: usize, t: u64) -> f64 {
        let (lo, hi) = self.buckets(arm, t);
        0.5 * (bandit::bucket_value(lo) + bandit::bucket_value(hi))
    }
}

impl Dynamics for DriftingBandit {
    fn initial(&self) -> EnvState {
        EnvState { steps: 0, key: 0 }
    }

    fn observation_probs(&self, state: &EnvState, action: ActionId, out: &mut [f64]) {
        out.fill(0.0);
        let (lo, hi) = self.buckets(action.index(), state.steps);
        out[lo] += 0.5;
        out[hi] += 0.5;
    }

    fn advance(&self, state: &EnvState, _action: ActionId, _observation: ObservationId) -> EnvState {
        EnvState { steps: state.steps + 1, key: 0 }
    }

    fn time_homogeneous(&self) -> bool {
        false
    }
}

pub fn make_drifting_bandit(k: usize, drift_period: u64, seed: u64) -> Result<EnvironmentModel> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("drifting bandit needs k >= 2 (got {k})")));
    }
    if k > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("too many arms: {k}")));
    }
    if drift_period == 0 {
        return Err(Error::InvalidArgument("drift period must be at least 1".into()));
    }
    let initial_best = (splitmix64(seed) % k as u64) as usize;
    let rewards = RewardFn::from_fn(k, bandit::BUCKETS, |_, o| bandit::bucket_value(o))?;
    let name = format!("drifting-bandit:k={k},period={drift_period},seed={seed}");
    let dynamics = DriftingBandit { k, drift_period, initial_best };
    Ok(EnvironmentModel::new(name, rewards, Arc::new(dynamics), true))
}

// ---------------------------------------------------------------------------
// Non-communicating chain
// ---------------------------------------------------------------------------

pub mod chain {
    use crate::history::ActionId;

    pub const STAY: ActionId = ActionId(0);
    pub const RIGHT: ActionId = ActionId(1);
}

#[derive(Debug)]
struct ChainDynamics {
    n: usize,
}

impl Dynamics for ChainDynamics {
    fn initial(&self) -> EnvState {
        EnvState { steps: 0, key: 0 }
    }

    fn observation_probs(&self, state: &EnvState, action: ActionId, out: &mut [f64]) {
        out.fill(0.0);
        let s = state.key as usize;
        let next = if action == chain::RIGHT { (s + 1).min(self.n - 1) } else { s };
        out[next] = 1.0;
    }

    fn advance(&self, state: &EnvState, _action: ActionId, observation: ObservationId) -> EnvState {
        EnvState { steps: state.steps + 1, key: observation.0 as u64 }
    }
}

/// `n` states in a line starting at state 0. RIGHT moves one state forward
/// (a self-loop at the end), STAY stays. The observation is the state
/// entered and the reward for entering state `i` is `stay_rewards[i]`.
pub fn make_noncomm_chain(n: usize, stay_rewards: &[f64]) -> Result<EnvironmentModel> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("chain needs n >= 2 (got {n})")));
    }
    if n > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("chain too long: {n}")));
    }
    if stay_rewards.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "chain of length {n} given {} stay rewards",
            stay_rewards.len()
        )));
    }
    let rewards = RewardFn::from_fn(2, n, |_, o| stay_rewards[o])?;
    let list: Vec<String> = stay_rewards.iter().map(|r| r.to_string()).collect();
    let name = format!("chain:rewards={}", list.join("/"));
    Ok(EnvironmentModel::new(name, rewards, Arc::new(ChainDynamics { n }), true))
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Splits `"name:key=value,key=value"` into the name and its parameters.
pub(crate) fn parse_spec(spec: &str) -> Result<(String, BTreeMap<String, String>)> {
    let spec = spec.trim();
    let (name, rest) = match spec.split_once(':') {
        Some((n, r)) => (n, r),
        None => (spec, ""),
    };
    let mut params = BTreeMap::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value in {spec:?}, got {part:?}")))?;
        if params.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse(format!("duplicate parameter {k:?} in {spec:?}")));
        }
    }
    Ok((name.to_string(), params))
}

pub(crate) struct Params {
    spec: String,
    map: BTreeMap<String, String>,
}

impl Params {
    pub(crate) fn new(spec: &str, map: BTreeMap<String, String>) -> Self {
        Params { spec: spec.to_string(), map }
    }

    pub(crate) fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Parse(format!("bad value {v:?} for {key} in {:?}", self.spec))),
        }
    }

    pub(crate) fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Parse(format!("unknown parameter {k:?} in {:?}", self.spec))),
        }
    }
}

/// Builds an environment from a registry string:
///
/// * `two-state`
/// * `fork[:period=P]`
/// * `drifting-bandit[:k=K,period=D,seed=S]`
/// * `chain:rewards=r0/r1/…[,n=N]`
pub fn make_env(spec: &str) -> Result<EnvironmentModel> {
    let (name, map) = parse_spec(spec)?;
    let mut p = Params::new(spec, map);
    let env = match name.as_str() {
        "two-state" => make_two_state(),
        "fork" => make_fork(p.take("period")?.unwrap_or(fork::DEFAULT_PERIOD))?,
        "drifting-bandit" => make_drifting_bandit(
            p.take("k")?.unwrap_or(2),
            p.take("period")?.unwrap_or(bandit::DEFAULT_PERIOD),
            p.take("seed")?.unwrap_or(0),
        )?,
        "chain" => {
            let raw = p
                .take_raw("rewards")
                .ok_or_else(|| Error::InvalidArgument("chain requires rewards=r0/r1/...".into()))?;
            let rewards = raw
                .split('/')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse(format!("bad chain rewards {raw:?}")))?;
            let n = p.take("n")?.unwrap_or(rewards.len());
            make_noncomm_chain(n, &rewards)?
        }
        other => return Err(Error::UnknownId(format!("environment {other:?}"))),
    };
    p.finish()?;
    Ok(env)
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{discounted_return, Horizon, History, RewardSequence, PROB_SUM_TOL};

    /// Rolls a deterministic action sequence through an environment whose
    /// dynamics are deterministic, returning the realised rewards.
    fn rollout(env: &EnvironmentModel, actions: &[ActionId]) -> Vec<f64> {
        let mut s = env.start_state();
        let mut out = Vec::new();
        for &a in actions {
            let p = env.observation_probs(&s, a);
            let o = p.iter().position(|&x| x == 1.0).expect("deterministic");
            let o = ObservationId(o as u16);
            out.push(env.reward_fn().get(a, o));
            s = env.advance(&s, a, o);
        }
        out
    }

    #[test]
    fn two_state_reward_table() {
        use two_state::*;
        let e = make_two_state();
        let rf = e.reward_fn();
        assert_eq!(rf.reward(SWITCH, STATE1).unwrap(), -10.0);
        assert_eq!(rf.reward(SWITCH, STATE2).unwrap(), -10.0);
        assert_eq!(rf.reward(STAY, STATE2).unwrap(), 2.0);
        assert_eq!(rf.reward(STAY, STATE1).unwrap(), 1.0);
        assert_eq!(e.r_star(), 10.0);
    }

    #[test]
    fn two_state_reference_returns() {
        use two_state::*;
        let e = make_two_state();
        // The stay stream from state 2 is constant +2.
        let r = rollout(&e, &[STAY; 40]);
        assert!(r.iter().all(|&x| x == 2.0));
        assert_eq!(RewardSequence::constant(2.0).discounted_return(0.5, Horizon::Infinite).unwrap(), 4.0);
        // Switch once then stay.
        let mut acts = vec![SWITCH];
        acts.extend([STAY; 40]);
        let r = rollout(&e, &acts);
        assert_eq!(r[0], -10.0);
        assert!(r[1..].iter().all(|&x| x == 1.0));
        let seq = RewardSequence::EventuallyPeriodic { prefix: vec![-10.0], cycle: vec![1.0] };
        assert_eq!(seq.discounted_return(0.5, Horizon::Infinite).unwrap(), -9.0);
        // From state 1 staying is worth 2.
        let h = History::from_steps(2, 2, [(SWITCH, STATE1)]).unwrap();
        let world = crate::history::suffix_environment(&e, &h).unwrap();
        let r = rollout(&world, &[STAY; 40]);
        assert!(r.iter().all(|&x| x == 1.0));
        assert_eq!(RewardSequence::constant(1.0).discounted_return(0.5, Horizon::Infinite).unwrap(), 2.0);
    }

    #[test]
    fn fork_left_rewards() {
        let e = make_fork(32).unwrap();
        let mut acts = vec![fork::LEFT];
        acts.extend([fork::PAPER; 10]);
        let r = rollout(&e, &acts);
        assert_eq!(r[0], 0.0);
        assert!(r[1..].iter().all(|&x| x == 1.0));
        let mut acts = vec![fork::LEFT];
        acts.extend([fork::ROCK; 10]);
        assert!(rollout(&e, &acts)[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fork_right_periodic_best_response() {
        let period = 7;
        let e = make_fork(period).unwrap();
        let pattern = fork_right_pattern(period);
        assert_eq!(pattern.len(), period);
        let mut acts = vec![fork::RIGHT];
        acts.extend((0..3 * period).map(|i| fork::best_response(pattern[i % period] as usize)));
        let r = rollout(&e, &acts);
        assert!(r[1..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn fork_branches_never_mix() {
        let e = make_fork(5).unwrap();
        for first in [fork::LEFT, fork::RIGHT, fork::SCISSORS] {
            let mut s = e.start_state();
            let p = e.observation_probs(&s, first);
            let o = p.iter().position(|&x| x == 1.0).unwrap() as u16;
            let left = first == fork::LEFT;
            assert_eq!(ObservationId(o), if left { fork::ENTER_LEFT } else { fork::ENTER_RIGHT });
            s = e.advance(&s, first, ObservationId(o));
            for i in 0..50u16 {
                let a = ActionId(i % 3);
                let p = e.observation_probs(&s, a);
                let o = p.iter().position(|&x| x == 1.0).unwrap() as u16;
                assert!(o < 3);
                if left {
                    assert_eq!(ObservationId(o), fork::OPP_ROCK);
                }
                s = e.advance(&s, a, ObservationId(o));
            }
        }
        assert!(make_fork(0).is_err());
    }

    #[test]
    fn chain_boundary_and_returns() {
        let e = make_noncomm_chain(3, &[0.5, 1.0, 3.0]).unwrap();
        let r = rollout(&e, &[chain::RIGHT, chain::RIGHT, chain::RIGHT, chain::RIGHT]);
        assert_eq!(r, vec![1.0, 3.0, 3.0, 3.0]);
        let r = rollout(&e, &[chain::STAY; 60]);
        assert!(r.iter().all(|&x| x == 0.5));
        let v = RewardSequence::constant(0.5).discounted_return(0.5, Horizon::Infinite).unwrap();
        assert_eq!(v, 2.0 * 0.5);
        assert!((discounted_return(&r, 0.5, Horizon::Infinite).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(make_noncomm_chain(3, &[1.0, 2.0]), Err(Error::DimensionMismatch(_))));
        assert!(make_noncomm_chain(1, &[1.0]).is_err());
    }

    #[test]
    fn bandit_schedule() {
        for seed in 0..20 {
            let e = make_drifting_bandit(3, 100, seed).unwrap();
            let b0 = (splitmix64(seed) % 3) as usize;
            let d = DriftingBandit { k: 3, drift_period: 100, initial_best: b0 };
            for t in 0..100 {
                assert_eq!(d.best_arm(t), b0);
            }
            assert_ne!(d.best_arm(100), d.best_arm(99));
            assert_eq!(e.r_star(), 1.0);
        }
        assert!(make_drifting_bandit(1, 100, 0).is_err());
    }

    #[test]
    fn bandit_gap_scan() {
        for k in 2..=6 {
            for b0 in 0..k {
                let d = DriftingBandit { k, drift_period: 10, initial_best: b0 };
                for t in 0..(10 * 3 * k as u64) {
                    let best = d.best_arm(t);
                    let mut means: Vec<(f64, usize)> = (0..k).map(|a| (d.mean(a, t), a)).collect();
                    means.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
                    assert_eq!(means[0].1, best);
                    assert!(means[0].0 - means[1].0 >= 0.3, "k={k} t={t} {means:?}");
                    for a in 0..k {
                        let m = d.mean(a, t);
                        assert!((-1.0..=1.0).contains(&m));
                    }
                }
            }
        }
    }

    #[test]
    fn registry() {
        assert_eq!(make_env("two-state").unwrap().name(), "two-state");
        assert_eq!(make_env("fork").unwrap().name(), "fork:period=32");
        let e = make_env("drifting-bandit:k=3,period=50,seed=9").unwrap();
        assert_eq!(e.action_count(), 3);
        assert_eq!(make_env(e.name()).unwrap().name(), e.name());
        let c = make_env("chain:rewards=1/-2/3").unwrap();
        assert_eq!(c.observation_count(), 3);
        assert_eq!(make_env(c.name()).unwrap().name(), c.name());
        assert!(matches!(make_env("nope"), Err(Error::UnknownId(_))));
        assert!(make_env("fork:bogus=1").is_err());
        assert!(make_env("chain:rewards=1/2,n=3").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn envs() -> Vec<EnvironmentModel> {
            vec![
                make_two_state(),
                make_fork(4).unwrap(),
                make_drifting_bandit(3, 7, 11).unwrap(),
                make_noncomm_chain(4, &[0.0, 1.0, -1.0, 2.0]).unwrap(),
            ]
        }

        proptest! {
            #[test]
            fn dynamics_are_distributions(which in 0usize..4, steps in prop::collection::vec((0u16..8, 0u16..64), 0..30), a in 0u16..8) {
                let env = &envs()[which];
                let mut h = env.empty_history();
                let mut s = env.start_state();
                for (x, y) in steps {
                    let act = ActionId(x % env.action_count() as u16);
                    let p = env.observation_probs(&s, act);
                    // follow a supported observation so the history stays realisable
                    let supported: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
                    let o = ObservationId(supported[y as usize % supported.len()] as u16);
                    h = h.push(act, o).unwrap();
                    s = env.advance(&s, act, o);
                }
                let act = ActionId(a % env.action_count() as u16);
                let p = env.dynamics(&h, act).unwrap();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
                prop_assert_eq!(p, env.observation_probs(&s, act));
            }

            #[test]
            fn suffix_composition(which in 0usize..4, steps in prop::collection::vec((0u16..8, 0u16..64), 0..24), split in 0usize..24, a in 0u16..8) {
                let env = &envs()[which];
                let mut h = env.empty_history();
                let mut s = env.start_state();
                for (x, y) in steps {
                    let act = ActionId(x % env.action_count() as u16);
                    let p = env.observation_probs(&s, act);
                    let supported: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
                    let o = ObservationId(supported[y as usize % supported.len()] as u16);
                    h = h.push(act, o).unwrap();
                    s = env.advance(&s, act, o);
                }
                let cut = split.min(h.len());
                let h1 = h.prefix(cut);
                let h2 = History::from_steps(env.action_count(), env.observation_count(),
                    h.steps()[cut..].iter().map(|st| (st.action, st.observation))).unwrap();
                let act = ActionId(a % env.action_count() as u16);
                let nested = crate::history::suffix_environment(&crate::history::suffix_environment(env, &h1).unwrap(), &h2).unwrap();
                let direct = crate::history::suffix_environment(env, &h).unwrap();
                let empty = env.empty_history();
                prop_assert_eq!(nested.dynamics(&empty, act).unwrap(), direct.dynamics(&empty, act).unwrap());
                prop_assert_eq!(direct.dynamics(&empty, act).unwrap(), env.dynamics(&h, act).unwrap());
                let same = crate::history::suffix_environment(env, &empty).unwrap();
                prop_assert_eq!(same.dynamics(&h, act).unwrap(), env.dynamics(&h, act).unwrap());
            }

            #[test]
            fn chain_never_moves_back(acts in prop::collection::vec(0u16..2, 1..60)) {
                let e = make_noncomm_chain(5, &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
                let mut s = e.start_state();
                for a in acts {
                    let p = e.observation_probs(&s, ActionId(a));
                    let o = p.iter().position(|&x| x == 1.0).unwrap() as u64;
                    prop_assert!(o >= s.key);
                    s = e.advance(&s, ActionId(a), ObservationId(o as u16));
                }
            }
        }
    }
}
