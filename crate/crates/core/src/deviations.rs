//! Deviations `φ : Π → Π` and finite deviation sets.

use std::fmt;
use std::path::Path;

use crate::agents::{validate_row, TabularPolicy};
use crate::error::{Error, Result};
use crate::history::ActionId;
use crate::transcript::{StepRecord, Transcript};

#[derive(Clone, PartialEq)]
pub enum Deviation {
    Identity,
    /// Constant deviation: every policy is replaced by `policy`.
    External { label: String, policy: TabularPolicy },
    /// Replaces the row of `state` with `row`, leaving other states alone.
    StateSwap { state: usize, row: Vec<f64> },
    /// A transcript snapshot, unresolved until [`Deviation::resolve`] is
    /// called.
    Checkpoint { id: u32, policy: Option<TabularPolicy> },
}

pub fn identity_deviation() -> Deviation {
    Deviation::Identity
}

impl fmt::Debug for Deviation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl Deviation {
    pub fn external(label: impl Into<String>, policy: TabularPolicy) -> Self {
        Deviation::External { label: label.into(), policy }
    }

    pub fn swap(state: usize, row: Vec<f64>) -> Result<Self> {
        validate_row(&row).map_err(Error::InvalidArgument)?;
        Ok(Deviation::StateSwap { state, row })
    }

    /// Swap to a deterministic action in one state.
    pub fn swap_to_action(state: usize, action: ActionId, action_count: usize) -> Result<Self> {
        crate::history::check_action(action, action_count)?;
        let mut row = vec![0.0; action_count];
        row[action.index()] = 1.0;
        Ok(Deviation::StateSwap { state, row })
    }

    pub fn checkpoint(id: u32) -> Self {
        Deviation::Checkpoint { id, policy: None }
    }

    /// Stable identifier used in reports.
    pub fn id(&self) -> String {
        match self {
            Deviation::Identity => "identity".into(),
            Deviation::External { label, .. } => format!("external:{label}"),
            Deviation::StateSwap { state, row } => {
                let parts: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                format!("swap:{state}:{}", parts.join("/"))
            }
            Deviation::Checkpoint { id, .. } => format!("checkpoint:{id}"),
        }
    }

    /// Binds a checkpoint to its snapshot in `tr`; other kinds are returned
    /// unchanged.
    pub fn resolve(&self, tr: &Transcript) -> Result<Deviation> {
        match self {
            Deviation::Checkpoint { id, .. } => {
                Ok(Deviation::Checkpoint { id: *id, policy: Some(tr.snapshot(*id)?.clone()) })
            }
            other => Ok(other.clone()),
        }
    }

    /// The constant policy of an external or resolved checkpoint deviation.
    pub fn constant_policy(&self) -> Option<&TabularPolicy> {
        match self {
            Deviation::External { policy, .. } => Some(policy),
            Deviation::Checkpoint { policy: Some(p), .. } => Some(p),
            _ => None,
        }
    }

    /// `φ(p)`.
    pub fn apply(&self, p: &TabularPolicy) -> Result<TabularPolicy> {
        match self {
            Deviation::Identity => Ok(p.clone()),
            Deviation::External { policy, .. } | Deviation::Checkpoint { policy: Some(policy), .. } => {
                check_shape(policy, p)?;
                Ok(policy.clone())
            }
            Deviation::Checkpoint { id, policy: None } => Err(Error::UnresolvedCheckpoint(*id)),
            Deviation::StateSwap { state, row } => p.with_row(*state, row),
        }
    }

    /// `φ(π)(a | s)` for the row `behavior_row = π(· | s)`.
    pub fn prob(&self, s: usize, a: ActionId, behavior_row: &[f64]) -> Result<f64> {
        match self {
            Deviation::Identity => Ok(behavior_row[a.index()]),
            Deviation::External { policy, .. } | Deviation::Checkpoint { policy: Some(policy), .. } => {
                policy.check_state(s)?;
                Ok(policy.prob(s, a))
            }
            Deviation::Checkpoint { id, policy: None } => Err(Error::UnresolvedCheckpoint(*id)),
            Deviation::StateSwap { state, row } => {
                Ok(if s == *state { row[a.index()] } else { behavior_row[a.index()] })
            }
        }
    }

    /// Likelihood ratio `φ(π_t)(a_t | s_t) / π_t(a_t | s_t)` at one recorded
    /// step. Only the behavior probability of the realised action is needed:
    /// identity and swaps outside their state give exactly 1.
    #[inline]
    pub fn step_ratio(&self, rec: &StepRecord) -> Result<f64> {
        match self {
            Deviation::Identity => Ok(1.0),
            Deviation::External { policy, .. } | Deviation::Checkpoint { policy: Some(policy), .. } => {
                policy.check_state(rec.state)?;
                Ok(policy.prob(rec.state, rec.action) / rec.prob)
            }
            Deviation::Checkpoint { id, policy: None } => Err(Error::UnresolvedCheckpoint(*id)),
            Deviation::StateSwap { state, row } => {
                if rec.state == *state {
                    Ok(row[rec.action.index()] / rec.prob)
                } else {
                    Ok(1.0)
                }
            }
        }
    }

    /// Checks that the deviation fits a transcript's action set.
    pub fn check_actions(&self, action_count: usize) -> Result<()> {
        let n = match self {
            Deviation::Identity => return Ok(()),
            Deviation::External { policy, .. } | Deviation::Checkpoint { policy: Some(policy), .. } => {
                policy.action_count()
            }
            Deviation::Checkpoint { id, policy: None } => return Err(Error::UnresolvedCheckpoint(*id)),
            Deviation::StateSwap { row, .. } => row.len(),
        };
        if n != action_count {
            return Err(Error::DimensionMismatch(format!(
                "deviation {} has {n} actions, transcript has {action_count}",
                self.id()
            )));
        }
        Ok(())
    }
}

fn check_shape(q: &TabularPolicy, p: &TabularPolicy) -> Result<()> {
    if q.state_count() != p.state_count() || q.action_count() != p.action_count() {
        return Err(Error::DimensionMismatch(format!(
            "deviation policy is {}x{}, input is {}x{}",
            q.state_count(),
            q.action_count(),
            p.state_count(),
            p.action_count()
        )));
    }
    Ok(())
}

/// A non-empty named list of deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationSet {
    members: Vec<Deviation>,
}

impl DeviationSet {
    pub fn new(members: Vec<Deviation>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("deviation set".into()));
        }
        Ok(DeviationSet { members })
    }

    pub fn members(&self) -> &[Deviation] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.members.iter().map(Deviation::id).collect()
    }

    pub fn push(&mut self, d: Deviation) {
        self.members.push(d);
    }

    pub fn extend(&mut self, other: DeviationSet) {
        self.members.extend(other.members);
    }
}

/// One constant deviation per snapshot of `tr`, in snapshot order.
pub fn checkpoint_set(tr: &Transcript) -> Result<DeviationSet> {
    if tr.snapshots.is_empty() {
        return Err(Error::Empty("transcript has no policy snapshots".into()));
    }
    DeviationSet::new(
        tr.snapshots
            .iter()
            .map(|(id, p)| Deviation::external(format!("checkpoint-{id}"), p.clone()))
            .collect(),
    )
}

/// First index attaining the maximum estimate.
pub fn argmax_regret(set: &DeviationSet, estimates: &[f64]) -> Result<(usize, f64)> {
    if set.len() != estimates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} deviations but {} estimates",
            set.len(),
            estimates.len()
        )));
    }
    argmax_first(estimates)
}

pub(crate) fn argmax_first(values: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::Empty("no estimates".into()))
}

/// Parses a deviation spec against the transcript being evaluated:
///
/// * `identity`
/// * `external:<policy.json>`: a file holding `{"probs": [[…], …]}`
/// * `swap:<state>:<action>`
/// * `checkpoint:<id>`
/// * `checkpoints:<transcript.jsonl>`, or `checkpoints:self` for `tr` itself
pub fn parse_deviations(spec: &str, tr: &Transcript) -> Result<DeviationSet> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let single = |d: Deviation| DeviationSet::new(vec![d]);
    match kind {
        "identity" if arg.is_empty() => single(Deviation::Identity),
        "external" => {
            let text = std::fs::read_to_string(Path::new(arg))?;
            let policy: TabularPolicy = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("policy file {arg}: {e}")))?;
            let label = Path::new(arg)
                .file_stem()
                .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            let d = Deviation::external(label, policy);
            d.check_actions(tr.header.action_count)?;
            single(d)
        }
        "swap" => {
            let (s, a) = arg
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("expected swap:<state>:<action>, got {spec:?}")))?;
            let s = s.parse().map_err(|_| Error::Parse(format!("bad state in {spec:?}")))?;
            let a: u16 = a.parse().map_err(|_| Error::Parse(format!("bad action in {spec:?}")))?;
            single(Deviation::swap_to_action(s, ActionId(a), tr.header.action_count)?)
        }
        "checkpoint" => {
            let id = arg.parse().map_err(|_| Error::Parse(format!("bad snapshot id in {spec:?}")))?;
            single(Deviation::checkpoint(id).resolve(tr)?)
        }
        "checkpoints" if arg == "self" => checkpoint_set(tr),
        "checkpoints" => {
            let other = Transcript::load(Path::new(arg))?;
            let set = checkpoint_set(&other)?;
            for d in set.members() {
                d.check_actions(tr.header.action_count)?;
            }
            Ok(set)
        }
        _ => Err(Error::UnknownId(format!("deviation spec {spec:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::TranscriptHeader;
    use std::collections::BTreeMap;

    fn tr_with(snaps: Vec<TabularPolicy>) -> Transcript {
        Transcript {
            header: TranscriptHeader {
                env: "two-state".into(),
                seed: 0,
                action_count: 2,
                obs_count: 2,
                c: 0.2,
                rng: None,
                r_star: None,
                agent: None,
            },
            steps: vec![],
            snapshots: snaps.into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn external_is_constant() {
        let star = TabularPolicy::from_rows(vec![vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        let d = Deviation::external("star", star.clone());
        let p = TabularPolicy::uniform(2, 2);
        assert_eq!(d.apply(&p).unwrap(), star);
        assert!(d.apply(&TabularPolicy::uniform(3, 2)).is_err());
    }

    #[test]
    fn swap_with_own_row_is_noop() {
        let p = TabularPolicy::from_rows(vec![vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let d = Deviation::swap(1, p.row(1).to_vec()).unwrap();
        assert_eq!(d.apply(&p).unwrap(), p);
        let d = Deviation::swap_to_action(0, ActionId(0), 2).unwrap();
        let q = d.apply(&p).unwrap();
        assert_eq!(q.row(0), &[1.0, 0.0]);
        assert_eq!(q.row(1), p.row(1));
        assert!(Deviation::swap_to_action(5, ActionId(0), 2).unwrap().apply(&p).is_err());
        assert!(Deviation::swap(0, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn checkpoint_resolution() {
        let tr = tr_with(vec![TabularPolicy::uniform(1, 2)]);
        let d = Deviation::checkpoint(0);
        assert!(matches!(d.apply(&TabularPolicy::uniform(1, 2)), Err(Error::UnresolvedCheckpoint(0))));
        let r = d.resolve(&tr).unwrap();
        let det = TabularPolicy::deterministic(2, &[ActionId(1)]).unwrap();
        assert_eq!(r.apply(&det).unwrap(), TabularPolicy::uniform(1, 2));
        assert!(matches!(Deviation::checkpoint(3).resolve(&tr), Err(Error::MissingSnapshot(3))));
    }

    #[test]
    fn checkpoint_set_size_and_members() {
        let snaps: Vec<_> = (0..5)
            .map(|i| TabularPolicy::from_rows(vec![vec![0.1 * i as f64, 1.0 - 0.1 * i as f64]]).unwrap())
            .collect();
        let tr = tr_with(snaps.clone());
        let set = checkpoint_set(&tr).unwrap();
        assert_eq!(set.len(), 5);
        for (d, snap) in set.members().iter().zip(&snaps) {
            assert_eq!(&d.apply(&TabularPolicy::uniform(1, 2)).unwrap(), snap);
        }
        assert!(matches!(checkpoint_set(&tr_with(vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn argmax_examples() {
        let set3 = DeviationSet::new(vec![Deviation::Identity; 3]).unwrap();
        assert_eq!(argmax_regret(&set3, &[0.1, 0.5, 0.3]).unwrap(), (1, 0.5));
        assert_eq!(argmax_regret(&set3, &[0.2, 0.2, 0.2]).unwrap(), (0, 0.2));
        let set1 = DeviationSet::new(vec![Deviation::Identity]).unwrap();
        assert_eq!(argmax_regret(&set1, &[-3.0]).unwrap(), (0, -3.0));
        assert!(argmax_regret(&set1, &[]).is_err());
        assert!(DeviationSet::new(vec![]).is_err());
        assert!(argmax_first(&[]).is_err());
    }

    #[test]
    fn parse_specs() {
        let tr = tr_with(vec![TabularPolicy::uniform(1, 2), TabularPolicy::uniform(1, 2)]);
        assert_eq!(parse_deviations("identity", &tr).unwrap().ids(), vec!["identity"]);
        assert_eq!(parse_deviations("swap:0:1", &tr).unwrap().ids(), vec!["swap:0:0/1"]);
        assert_eq!(parse_deviations("checkpoint:1", &tr).unwrap().ids(), vec!["checkpoint:1"]);
        assert_eq!(parse_deviations("checkpoints:self", &tr).unwrap().len(), 2);
        assert!(matches!(parse_deviations("bogus", &tr), Err(Error::UnknownId(_))));
        assert!(parse_deviations("swap:0:7", &tr).is_err());
        assert!(parse_deviations("checkpoint:9", &tr).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stay.json");
        std::fs::write(&path, r#"{"probs":[[1.0,0.0]]}"#).unwrap();
        let set = parse_deviations(&format!("external:{}", path.display()), &tr).unwrap();
        assert_eq!(set.ids(), vec!["external:stay"]);
        assert!(parse_deviations("external:/nonexistent/x.json", &tr).unwrap_err().is_io());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn row(k: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, k).prop_map(|r| {
                let s: f64 = r.iter().sum();
                let mut v: Vec<f64> = r.iter().map(|x| x / s).collect();
                let tail: f64 = v[1..].iter().sum();
                v[0] = 1.0 - tail;
                v
            })
        }

        fn policy(ns: usize, k: usize) -> impl Strategy<Value = TabularPolicy> {
            prop::collection::vec(row(k), ns).prop_map(|rows| TabularPolicy::from_rows(rows).unwrap())
        }

        proptest! {
            #[test]
            fn identity_is_exact(p in policy(3, 4)) {
                let d = identity_deviation();
                prop_assert_eq!(d.apply(&p).unwrap(), p.clone());
                let e = Deviation::swap(1, vec![0.25; 4]).unwrap();
                prop_assert_eq!(d.apply(&e.apply(&p).unwrap()).unwrap(), e.apply(&p).unwrap());
            }

            #[test]
            fn external_ignores_input(p in policy(2, 3), q in policy(2, 3), star in policy(2, 3)) {
                let d = Deviation::external("x", star);
                prop_assert_eq!(d.apply(&p).unwrap(), d.apply(&q).unwrap());
            }

            #[test]
            fn step_ratio_matches_apply(p in policy(2, 3), star in policy(2, 3), s in 0usize..2, a in 0u16..3) {
                for d in [identity_deviation(), Deviation::external("x", star.clone()), Deviation::swap_to_action(1, ActionId(2), 3).unwrap()] {
                    let rec = StepRecord { t: 1, state: s, action: ActionId(a), prob: p.prob(s, ActionId(a)), obs: crate::history::ObservationId(0), reward: 0.0, policy_id: 0 };
                    let expected = d.apply(&p).unwrap().prob(s, ActionId(a)) / rec.prob;
                    let got = d.step_ratio(&rec).unwrap();
                    prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
                    prop_assert_eq!(d.prob(s, ActionId(a), p.row(s)).unwrap(), d.apply(&p).unwrap().prob(s, ActionId(a)));
                }
            }
        }
    }
}
