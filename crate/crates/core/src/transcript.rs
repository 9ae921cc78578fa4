//! Recorded agent–environment interaction and its JSON Lines file format.
//!
//! A file is a header line, one line per step, and a trailer line holding the
//! policy snapshots. Probabilities and rewards are written in scientific
//! notation with 17 significant digits so every value reads back bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentSpec, TabularPolicy};
use crate::error::{Error, Result};
use crate::history::{ActionId, EnvironmentModel, History, ObservationId};

pub const RNG_NAME: &str = "chacha8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub env: String,
    pub seed: u64,
    pub action_count: usize,
    pub obs_count: usize,
    pub c: f64,
    #[serde(default)]
    pub rng: Option<String>,
    #[serde(default)]
    pub r_star: Option<f64>,
    #[serde(default)]
    pub agent: Option<AgentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub state: usize,
    pub action: ActionId,
    pub prob: f64,
    pub obs: ObservationId,
    pub reward: f64,
    pub policy_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub header: TranscriptHeader,
    pub steps: Vec<StepRecord>,
    pub snapshots: BTreeMap<u32, TabularPolicy>,
}

#[derive(Deserialize)]
struct Trailer {
    policy_snapshots: BTreeMap<String, TabularPolicy>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// `r*` from the header, or the largest recorded |reward| when absent.
    pub fn r_star(&self) -> f64 {
        self.header
            .r_star
            .unwrap_or_else(|| self.steps.iter().fold(0.0, |m, s| f64::max(m, s.reward.abs())))
    }

    pub fn snapshot(&self, id: u32) -> Result<&TabularPolicy> {
        self.snapshots.get(&id).ok_or(Error::MissingSnapshot(id))
    }

    /// The first `t` steps as a history.
    pub fn history(&self, t: usize) -> Result<History> {
        History::from_steps(
            self.header.action_count,
            self.header.obs_count,
            self.steps[..t.min(self.steps.len())].iter().map(|s| (s.action, s.obs)),
        )
    }

    /// Copy restricted to the first `t` steps. Snapshots are kept.
    pub fn truncated(&self, t: usize) -> Transcript {
        Transcript {
            header: self.header.clone(),
            steps: self.steps[..t.min(self.steps.len())].to_vec(),
            snapshots: self.snapshots.clone(),
        }
    }

    /// Structural checks: step numbering, index ranges, probabilities in
    /// `(0, 1]` and at least the floor `c`, snapshot shapes.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if !(h.c > 0.0 && h.c <= 1.0) {
            return Err(Error::Parse(format!("header floor c = {} outside (0, 1]", h.c)));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.t != i as u64 + 1 {
                return Err(Error::Parse(format!("step {} recorded with t = {}", i + 1, s.t)));
            }
            if s.action.index() >= h.action_count {
                return Err(Error::ActionOutOfRange { index: s.action.index(), count: h.action_count });
            }
            if s.obs.index() >= h.obs_count {
                return Err(Error::ObservationOutOfRange { index: s.obs.index(), count: h.obs_count });
            }
            if !(s.prob > 0.0 && s.prob <= 1.0) {
                return Err(Error::Parse(format!("step {}: probability {} outside (0, 1]", s.t, s.prob)));
            }
            check_floor_prob(s.t, s.prob, h.c)?;
            if !s.reward.is_finite() {
                return Err(Error::Parse(format!("step {}: non-finite reward", s.t)));
            }
        }
        for (id, p) in &self.snapshots {
            if p.action_count() != h.action_count {
                return Err(Error::DimensionMismatch(format!(
                    "snapshot {id} has {} actions, transcript has {}",
                    p.action_count(),
                    h.action_count
                )));
            }
        }
        Ok(())
    }

    /// Recomputes every reward from the environment and checks the
    /// observations were possible at all. Detects corrupted or mismatched
    /// transcripts.
    pub fn check_against(&self, env: &EnvironmentModel) -> Result<()> {
        if env.action_count() != self.header.action_count || env.observation_count() != self.header.obs_count {
            return Err(Error::Mismatch(format!(
                "environment {} is {}x{}, transcript is {}x{}",
                env.name(),
                env.action_count(),
                env.observation_count(),
                self.header.action_count,
                self.header.obs_count
            )));
        }
        let mut state = env.start_state();
        let mut probs = vec![0.0; env.observation_count()];
        for s in &self.steps {
            let r = env.reward_fn().get(s.action, s.obs);
            if r != s.reward {
                return Err(Error::Mismatch(format!(
                    "step {}: recorded reward {} but R(a{}, o{}) = {r}",
                    s.t, s.reward, s.action.0, s.obs.0
                )));
            }
            env.observation_probs_into(&state, s.action, &mut probs);
            if probs[s.obs.index()] <= 0.0 {
                return Err(Error::Mismatch(format!("step {}: observation o{} has probability 0", s.t, s.obs.0)));
            }
            state = env.advance(&state, s.action, s.obs);
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        let mut line = String::with_capacity(160);
        for s in &self.steps {
            line.clear();
            write!(
                line,
                "{{\"t\":{},\"state\":{},\"action\":{},\"prob\":{:.16e},\"obs\":{},\"reward\":{:.16e},\"policy_id\":{}}}",
                s.t, s.state, s.action.0, s.prob, s.obs.0, s.reward, s.policy_id
            )
            .expect("writing to a String");
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        line.clear();
        line.push_str("{\"policy_snapshots\":{");
        for (i, (id, p)) in self.snapshots.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            write!(line, "\"{id}\":{{\"probs\":[").expect("writing to a String");
            for (r, row) in p.rows().enumerate() {
                if r > 0 {
                    line.push(',');
                }
                line.push('[');
                for (j, x) in row.iter().enumerate() {
                    if j > 0 {
                        line.push(',');
                    }
                    write!(line, "{x:.16e}").expect("writing to a String");
                }
                line.push(']');
            }
            line.push_str("]}");
        }
        line.push_str("}}\n");
        w.write_all(line.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Transcript> {
        let mut lines = BufReader::new(r).lines();
        let header_line = lines.next().ok_or_else(|| Error::Parse("empty transcript".into()))??;
        let header: TranscriptHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Parse(format!("header: {e}")))?;
        let mut steps = Vec::new();
        let mut snapshots = None;
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if snapshots.is_some() {
                return Err(Error::Parse(format!("line {}: data after trailer", n + 2)));
            }
            if line.starts_with("{\"policy_snapshots\"") {
                let t: Trailer = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("trailer: {e}")))?;
                let mut map = BTreeMap::new();
                for (k, v) in t.policy_snapshots {
                    let id = k.parse::<u32>().map_err(|_| Error::Parse(format!("snapshot id {k:?}")))?;
                    map.insert(id, v);
                }
                snapshots = Some(map);
            } else {
                let s: StepRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)))?;
                steps.push(s);
            }
        }
        let snapshots = snapshots.ok_or_else(|| Error::Parse("missing policy_snapshots trailer".into()))?;
        let tr = Transcript { header, steps, snapshots };
        tr.validate()?;
        Ok(tr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Transcript> {
        Transcript::read_jsonl(File::open(path)?)
    }
}

/// Probabilities are compared against the floor with a relative slack of
/// 1e-12 so that `c` itself, reconstructed by floating arithmetic, passes.
pub(crate) fn check_floor_prob(t: u64, prob: f64, c: f64) -> Result<()> {
    if prob < c * (1.0 - 1e-12) {
        Err(Error::BelowFloor { t, prob, floor: c })
    } else {
        Ok(())
    }
}
