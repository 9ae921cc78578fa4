//! Seeded runs, evaluation pipelines, seed sweeps and the drifting-bandit
//! checkpoint experiment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::agents::{make_agent, Agent, AgentSpec};
use crate::deviations::{parse_deviations, DeviationSet};
use crate::environments::make_env;
use crate::error::{Error, Result};
use crate::estimator::{effective_horizon, evaluate, max_regret, write_summary_csv, write_traces_csv, EvalConfig, RegretReport};
use crate::history::{sample_index, ActionId, EnvironmentModel, ObservationId};
use crate::transcript::{StepRecord, Transcript, TranscriptHeader, RNG_NAME};

pub const AGENT_STREAM: u64 = 1;
pub const ENV_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Environment registry string, e.g. `two-state` or `fork:period=16`.
    pub env: String,
    /// Agent registry string, e.g. `q-soft:c=0.2,K=500`.
    pub agent: String,
    pub steps: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(env: impl Into<String>, agent: impl Into<String>, steps: usize, seed: u64) -> Self {
        RunConfig { env: env.into(), agent: agent.into(), steps, seed, output: None }
    }

    pub fn with_output(mut self, path: impl Into<PathBuf>) -> Self {
        self.output = Some(path.into());
        self
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig { seed, output: None, ..self.clone() }
    }

    /// Builds and checks the environment and agent.
    pub fn build(&self) -> Result<(EnvironmentModel, AgentSpec)> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("a run needs at least one step".into()));
        }
        let env = make_env(&self.env)?;
        let agent = make_agent(&self.agent, &env)?;
        Ok((env, agent))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The interaction loop. Agent sampling and environment sampling draw from
/// separate ChaCha8 streams of the same seed. Snapshot `j` is the policy in
/// force after `j·K` steps, for `j = 0..=⌊T/K⌋`.
pub fn simulate(env: &EnvironmentModel, spec: &AgentSpec, steps: usize, seed: u64) -> Result<Transcript> {
    if steps == 0 {
        return Err(Error::InvalidArgument("a run needs at least one step".into()));
    }
    if spec.action_count != env.action_count() {
        return Err(Error::DimensionMismatch(format!(
            "agent has {} actions, environment {} has {}",
            spec.action_count,
            env.name(),
            env.action_count()
        )));
    }
    let mut agent_rng = stream(seed, AGENT_STREAM);
    let mut env_rng = stream(seed, ENV_STREAM);
    let mut agent = Agent::new(spec.clone(), env.r_star());
    let k = spec.snapshot_period;
    let mut snapshots = BTreeMap::new();
    let mut records = Vec::with_capacity(steps);
    let mut row = vec![0.0; env.action_count()];
    let mut probs = vec![0.0; env.observation_count()];
    let mut es = env.start_state();
    for t in 1..=steps {
        if (t - 1) % k == 0 {
            snapshots.insert(((t - 1) / k) as u32, agent.policy());
        }
        let s = agent.state();
        agent.policy_row(s, &mut row);
        let a = sample_index(&row, agent_rng.gen::<f64>());
        let prob = row[a];
        let a = ActionId(a as u16);
        env.observation_probs_into(&es, a, &mut probs);
        let o = ObservationId(sample_index(&probs, env_rng.gen::<f64>()) as u16);
        let r = env.reward_fn().get(a, o);
        records.push(StepRecord { t: t as u64, state: s, action: a, prob, obs: o, reward: r, policy_id: ((t - 1) / k) as u32 });
        agent.observe(a, o, r);
        es = env.advance(&es, a, o);
    }
    if steps.is_multiple_of(k) {
        snapshots.insert((steps / k) as u32, agent.policy());
    }
    Ok(Transcript {
        header: TranscriptHeader {
            env: env.name().to_string(),
            seed,
            action_count: env.action_count(),
            obs_count: env.observation_count(),
            c: spec.c(),
            rng: Some(RNG_NAME.to_string()),
            r_star: Some(env.r_star()),
            agent: Some(spec.clone()),
        },
        steps: records,
        snapshots,
    })
}

/// Runs `cfg` and writes the transcript when an output path is set.
pub fn run(cfg: &RunConfig) -> Result<Transcript> {
    let (env, agent) = cfg.build()?;
    let tr = simulate(&env, &agent, cfg.steps, cfg.seed)?;
    if let Some(path) = &cfg.output {
        tr.save(path)?;
    }
    Ok(tr)
}

/// Union of several deviation specs, in order.
pub fn parse_deviation_list(specs: &[String], tr: &Transcript) -> Result<DeviationSet> {
    let mut iter = specs.iter();
    let first = iter.next().ok_or(Error::Empty("no deviation specs".into()))?;
    let mut set = parse_deviations(first, tr)?;
    for s in iter {
        set.extend(parse_deviations(s, tr)?);
    }
    Ok(set)
}

/// Replays the rewards against the environment named in the header when it
/// is a registry id. Transcripts of unregistered environments are only
/// structurally checked.
pub fn check_replay(tr: &Transcript) -> Result<()> {
    match make_env(&tr.header.env) {
        Ok(env) => tr.check_against(&env),
        Err(_) => Ok(()),
    }
}

/// Summary and (optionally) per-step trace CSVs for one transcript.
#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub reports: Vec<RegretReport>,
    pub best: usize,
    pub summary_path: PathBuf,
    pub traces_path: Option<PathBuf>,
}

/// Loads a transcript, evaluates every deviation in `specs`, and writes
/// `summary.csv` (and `traces.csv` when `cfg.keep_traces`) into `out_dir`.
/// The transcript file is only read.
pub fn evaluate_file(path: &Path, specs: &[String], cfg: &EvalConfig, out_dir: &Path) -> Result<EvaluationOutput> {
    let tr = Transcript::load(path)?;
    check_replay(&tr)?;
    let set = parse_deviation_list(specs, &tr)?;
    let (best, _, reports) = max_regret(&tr, &set, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let summary_path = out_dir.join("summary.csv");
    write_summary_csv(&reports, BufWriter::new(File::create(&summary_path)?))?;
    let traces_path = if cfg.keep_traces {
        let p = out_dir.join("traces.csv");
        write_traces_csv(&reports, BufWriter::new(File::create(&p)?))?;
        Some(p)
    } else {
        None
    };
    Ok(EvaluationOutput { reports, best, summary_path, traces_path })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub deviation_id: String,
    pub rho_hat: f64,
    pub max_weight: f64,
    pub zero_weight_fraction: f64,
    pub h_used: usize,
    pub violations: usize,
}

impl From<&RegretReport> for ReportSummary {
    fn from(r: &RegretReport) -> Self {
        ReportSummary {
            deviation_id: r.deviation_id.clone(),
            rho_hat: r.estimate,
            max_weight: r.max_weight,
            zero_weight_fraction: r.zero_weight_fraction,
            h_used: r.h_used,
            violations: r.violations.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best: usize,
    pub best_id: String,
    pub max_rho_hat: f64,
    pub reports: Vec<ReportSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub deviation_id: String,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Bound {
    AtLeast(f64),
    AtMost(f64),
}

impl Bound {
    pub fn holds(&self, x: f64) -> bool {
        match *self {
            Bound::AtLeast(b) => x >= b,
            Bound::AtMost(b) => x <= b,
        }
    }
}

/// "max ρ̂ satisfies `bound` on at least `required` seeds".
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Predicate {
    pub name: String,
    pub bound: Bound,
    pub required: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateResult {
    pub predicate: Predicate,
    pub hits: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub runs: Vec<SeedSummary>,
    /// Per deviation id, then a final `max` row over the per-seed maxima.
    pub aggregates: Vec<Aggregate>,
    pub predicates: Vec<PredicateResult>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SweepResult {
    fn from_runs(runs: Vec<SeedSummary>, predicates: &[Predicate]) -> Self {
        let mut by_id: Vec<(String, Vec<f64>)> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for run in &runs {
            for r in &run.reports {
                let i = *index.entry(r.deviation_id.clone()).or_insert_with(|| {
                    by_id.push((r.deviation_id.clone(), Vec::new()));
                    by_id.len() - 1
                });
                by_id[i].1.push(r.rho_hat);
            }
        }
        let mut aggregates: Vec<Aggregate> = by_id
            .into_iter()
            .map(|(id, xs)| {
                let (mean, stderr) = mean_stderr(&xs);
                Aggregate { deviation_id: id, n: xs.len(), mean, stderr }
            })
            .collect();
        let maxima: Vec<f64> = runs.iter().map(|r| r.max_rho_hat).collect();
        let (mean, stderr) = mean_stderr(&maxima);
        aggregates.push(Aggregate { deviation_id: "max".into(), n: maxima.len(), mean, stderr });
        let predicates = predicates
            .iter()
            .map(|p| {
                let hits = maxima.iter().filter(|&&x| p.bound.holds(x)).count();
                PredicateResult { predicate: p.clone(), hits, passed: hits >= p.required }
            })
            .collect();
        SweepResult { runs, aggregates, predicates }
    }

    pub fn maxima(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.max_rho_hat).collect()
    }

    /// Columns `seed, deviation_id, rho_hat, max_weight, zero_weight_fraction, H_used, is_best`.
    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "deviation_id", "rho_hat", "max_weight", "zero_weight_fraction", "H_used", "is_best"])?;
        for run in &self.runs {
            for (i, r) in run.reports.iter().enumerate() {
                out.write_record([
                    run.seed.to_string(),
                    r.deviation_id.clone(),
                    r.rho_hat.to_string(),
                    r.max_weight.to_string(),
                    r.zero_weight_fraction.to_string(),
                    r.h_used.to_string(),
                    (i == run.best).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `deviation_id, n, mean, stderr`.
    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["deviation_id", "n", "mean", "stderr"])?;
        for a in &self.aggregates {
            out.write_record([a.deviation_id.clone(), a.n.to_string(), a.mean.to_string(), a.stderr.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Empty("empty seed list".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("seed {} listed twice", w[0])));
    }
    Ok(())
}

/// One seed: run, then evaluate every deviation. With `keep_best`, the
/// best deviation is re-evaluated with traces.
fn run_and_evaluate(
    base: &RunConfig,
    seed: u64,
    specs: &[String],
    cfg: &EvalConfig,
    keep_best: bool,
) -> Result<(SeedSummary, Option<RegretReport>)> {
    let tr = run(&base.with_seed(seed))?;
    let set = parse_deviation_list(specs, &tr)?;
    let light = (*cfg).without_traces();
    let (best, value, reports) = max_regret(&tr, &set, &light)?;
    let traced = if keep_best {
        let mut r = evaluate(&tr, &set.members()[best], &EvalConfig { keep_traces: true, ..*cfg })?;
        r.deviation_id = reports[best].deviation_id.clone();
        Some(r)
    } else {
        None
    };
    let summary = SeedSummary {
        seed,
        best,
        best_id: reports[best].deviation_id.clone(),
        max_rho_hat: value,
        reports: reports.iter().map(ReportSummary::from).collect(),
    };
    Ok((summary, traced))
}

/// Independent runs of `base` for each seed, evaluated against the union of
/// `specs`. Runs execute in parallel; the result is the same as a serial
/// sweep.
pub fn sweep(
    base: &RunConfig,
    seeds: &[u64],
    specs: &[String],
    cfg: &EvalConfig,
    predicates: &[Predicate],
) -> Result<SweepResult> {
    check_seeds(seeds)?;
    base.build()?;
    let runs = seeds
        .par_iter()
        .map(|&s| run_and_evaluate(base, s, specs, cfg, false).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult::from_runs(runs, predicates))
}

/// Parses `a..b` (half-open) or a comma-separated list.
pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let bad = || Error::Parse(format!("bad seed list {raw:?}"));
    let seeds: Vec<u64> = if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else {
        raw.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    check_seeds(&seeds)?;
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Drifting-bandit checkpoint experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Config {
    pub arms: usize,
    pub drift_period: u64,
    pub steps: usize,
    pub snapshot_period: usize,
    pub gamma: f64,
    /// `H = effective_horizon(delta, gamma, r*)`.
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub forgetful_agent: String,
    pub competent_agent: String,
    /// Every `sample_every`-th step goes into the plotting CSV.
    pub sample_every: usize,
}

impl Default for Fig2Config {
    fn default() -> Self {
        Fig2Config {
            arms: 2,
            drift_period: 5000,
            steps: 1_000_000,
            snapshot_period: 1000,
            gamma: 0.5,
            delta: 0.05,
            seeds: (0..10).collect(),
            forgetful_agent: "forgetful-q:c=0.25,alpha=0.01,decay=0.01,pessimism=-20".into(),
            competent_agent: "q-soft:c=0.25,alpha=0.1".into(),
            sample_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Sample {
    pub agent: String,
    pub seed: u64,
    pub t: usize,
    pub agent_return: f64,
    pub deviation_return: f64,
    pub deviation_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Output {
    pub horizon: usize,
    pub gamma: f64,
    pub forgetful: SweepResult,
    pub competent: SweepResult,
    pub samples: Vec<Fig2Sample>,
}

pub const FIG2_FORGETFUL_MIN: f64 = 0.2;
pub const FIG2_COMPETENT_MAX: f64 = 0.05;

/// Forgetful and competent agents on the drifting bandit, each evaluated
/// against the identity plus every snapshot of its own run.
pub fn fig2_analog(cfg: &Fig2Config) -> Result<Fig2Output> {
    check_seeds(&cfg.seeds)?;
    if cfg.sample_every == 0 {
        return Err(Error::InvalidArgument("sample_every must be at least 1".into()));
    }
    let h = effective_horizon(cfg.delta, cfg.gamma, 1.0)?;
    let specs = vec!["identity".to_string(), "checkpoints:self".to_string()];
    let required = (cfg.seeds.len() * 9).div_ceil(10);
    let mut samples = Vec::new();
    let mut results = Vec::new();
    for (label, agent, bound) in [
        ("forgetful", &cfg.forgetful_agent, Bound::AtLeast(FIG2_FORGETFUL_MIN)),
        ("competent", &cfg.competent_agent, Bound::AtMost(FIG2_COMPETENT_MAX)),
    ] {
        let sep = if agent.contains(':') { ',' } else { ':' };
        let agent_spec = format!("{agent}{sep}K={}", cfg.snapshot_period);
        let per_seed: Vec<Result<(SeedSummary, Option<RegretReport>)>> = cfg
            .seeds
            .par_iter()
            .map(|&seed| {
                let env = format!("drifting-bandit:k={},period={},seed={seed}", cfg.arms, cfg.drift_period);
                let base = RunConfig::new(env, agent_spec.clone(), cfg.steps, seed);
                let (_, spec) = base.build()?;
                let eval = EvalConfig::finite(cfg.gamma, h, spec.c())?;
                run_and_evaluate(&base, seed, &specs, &eval, true)
            })
            .collect();
        let mut runs = Vec::with_capacity(per_seed.len());
        for r in per_seed {
            let (summary, traced) = r?;
            let traced = traced.expect("kept");
            let traces = traced.traces.as_ref().expect("traced");
            for i in (0..traced.t_count).step_by(cfg.sample_every) {
                samples.push(Fig2Sample {
                    agent: label.to_string(),
                    seed: summary.seed,
                    t: i + 1,
                    agent_return: traces.g[i],
                    deviation_return: traces.g_prime[i],
                    deviation_id: traced.deviation_id.clone(),
                });
            }
            runs.push(summary);
        }
        let pred = Predicate { name: format!("{label} max regret"), bound, required };
        results.push(SweepResult::from_runs(runs, &[pred]));
    }
    let competent = results.pop().expect("two sweeps");
    let forgetful = results.pop().expect("two sweeps");
    Ok(Fig2Output { horizon: h, gamma: cfg.gamma, forgetful, competent, samples })
}

impl Fig2Output {
    /// Plot-ready samples, preceded by a `#` line giving `H` and `γ`.
    pub fn write_samples_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# H={},gamma={}", self.horizon, self.gamma)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["agent", "seed", "t", "agent_return", "deviation_return", "deviation_id"])?;
        for s in &self.samples {
            out.write_record([
                s.agent.clone(),
                s.seed.to_string(),
                s.t.to_string(),
                s.agent_return.to_string(),
                s.deviation_return.to_string(),
                s.deviation_id.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `agent, seed, best_deviation, max_rho_hat`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# H={},gamma={}", self.horizon, self.gamma)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["agent", "seed", "best_deviation", "max_rho_hat"])?;
        for (label, res) in [("forgetful", &self.forgetful), ("competent", &self.competent)] {
            for r in &res.runs {
                out.write_record([label.to_string(), r.seed.to_string(), r.best_id.clone(), r.max_rho_hat.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.forgetful.predicates.iter().chain(&self.competent.predicates).all(|p| p.passed)
    }
}
