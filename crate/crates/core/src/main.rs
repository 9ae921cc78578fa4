use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use devregret::agents::AgentSpec;
use devregret::environments::make_env;
use devregret::estimator::{AgentTail, EvalConfig, Mode};
use devregret::harness::{evaluate_file, fig2_analog, parse_deviation_list, parse_seeds, run, sweep, Fig2Config, RunConfig};
use devregret::history::Horizon;
use devregret::oracle::{exact_rho, Behavior, OracleConfig, TailMode, DEPTH_GUARD};
use devregret::transcript::Transcript;
use devregret::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "devregret", version, about = "Deviation-regret estimation for continually learning agents")]
#[command(args_override_self = true)]
struct Cli {
    /// File of `key = value` lines used as defaults for the subcommand's
    /// flags (`#` starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an agent in an environment and write the transcript.
    Run(RunArgs),
    /// Estimate deviation regret from a transcript and write CSV reports.
    Evaluate(EvaluateArgs),
    /// Exact regret of a transcript by tree enumeration.
    Oracle(OracleArgs),
    /// Repeat a run over several seeds and aggregate the estimates.
    Sweep(SweepArgs),
    /// Forgetful vs competent agent on the drifting bandit with checkpoint deviations.
    Fig2Analog(Fig2Args),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Environment id, e.g. `two-state`, `fork:period=32`, `drifting-bandit:k=2`.
    #[arg(long)]
    env: String,
    /// Agent id, e.g. `q-soft:c=0.2,K=1000`.
    #[arg(long)]
    agent: String,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Truncated,
    Idealized,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TailArg {
    Matched,
    FullSuffix,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Window length, or `inf` for the infinite-horizon estimator.
    #[arg(long, default_value = "8")]
    horizon: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Truncated)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = TailArg::Matched)]
    agent_tail: TailArg,
}

impl EvalArgs {
    fn config(&self, c: f64) -> Result<EvalConfig> {
        let horizon = parse_horizon(&self.horizon)?;
        let mode = match self.mode {
            ModeArg::Truncated => Mode::Truncated,
            ModeArg::Idealized => Mode::Idealized,
        };
        let tail = match self.agent_tail {
            TailArg::Matched => AgentTail::Matched,
            TailArg::FullSuffix => AgentTail::FullSuffix,
        };
        Ok(EvalConfig::new(self.gamma, horizon, c)?.with_mode(mode).with_agent_tail(tail))
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, short)]
    transcript: PathBuf,
    /// Deviation spec; repeat for a set. `identity`, `external:<policy.json>`,
    /// `swap:<s>:<a>`, `checkpoint:<id>`, `checkpoints:self`, `checkpoints:<transcript>`.
    #[arg(long = "deviation", short, required = true)]
    deviations: Vec<String>,
    #[command(flatten)]
    eval: EvalArgs,
    /// Also write per-step traces.
    #[arg(long)]
    traces: bool,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OracleTailArg {
    Zero,
    AnalyticGeometric,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, short)]
    transcript: PathBuf,
    #[arg(long = "deviation", short, required = true)]
    deviations: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value = "8")]
    horizon: String,
    #[arg(long, default_value_t = DEPTH_GUARD)]
    max_depth: usize,
    #[arg(long, value_enum, default_value_t = OracleTailArg::AnalyticGeometric)]
    tail: OracleTailArg,
    /// CSV output; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    env: String,
    #[arg(long)]
    agent: String,
    #[arg(long)]
    steps: usize,
    /// `a..b` or a comma-separated list.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    #[arg(long = "deviation", short, required = true)]
    deviations: Vec<String>,
    #[command(flatten)]
    eval: EvalArgs,
    /// Directory for `runs.csv` and `aggregate.csv`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Fig2Args {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seeds: Option<String>,
    /// Directory for `samples.csv`, `summary.csv` and the per-agent sweep tables.
    #[arg(long, short)]
    out: PathBuf,
}

fn parse_horizon(raw: &str) -> Result<Horizon> {
    match raw.trim() {
        "inf" | "infinite" => Ok(Horizon::Infinite),
        s => s
            .parse()
            .map(Horizon::Finite)
            .map_err(|_| Error::Parse(format!("horizon must be a positive integer or `inf`, got {raw:?}"))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let cfg = RunConfig::new(a.env, a.agent, a.steps, a.seed).with_output(&a.out);
    let tr = run(&cfg)?;
    eprintln!("wrote {} steps, {} snapshots to {}", tr.len(), tr.snapshots.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let c = Transcript::load(&a.transcript)?.header.c;
    let mut cfg = a.eval.config(c)?;
    if !a.traces {
        cfg = cfg.without_traces();
    }
    let out = evaluate_file(&a.transcript, &a.deviations, &cfg, &a.out)?;
    let best = &out.reports[out.best];
    println!("max rho_hat = {} ({})", best.estimate, best.deviation_id);
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let tr = Transcript::load(&a.transcript)?;
    let env = make_env(&tr.header.env)?;
    let spec: AgentSpec = tr
        .header
        .agent
        .clone()
        .ok_or_else(|| Error::InvalidArgument("transcript header has no agent description".into()))?;
    let tail = match a.tail {
        OracleTailArg::Zero => TailMode::Zero,
        OracleTailArg::AnalyticGeometric => TailMode::AnalyticGeometric,
    };
    let cfg = OracleConfig::new(a.max_depth, tail)?;
    let horizon = parse_horizon(&a.horizon)?;
    let set = parse_deviation_list(&a.deviations, &tr)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut out = csv::Writer::from_writer(sink);
    out.write_record(["deviation_id", "rho", "half_width"])?;
    for d in set.members() {
        let v = exact_rho(&tr, &env, Behavior::Agent(&spec), d, horizon, a.gamma, &cfg)?;
        out.write_record([d.id(), v.value.to_string(), v.half_width.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = RunConfig::new(a.env, a.agent, a.steps, 0);
    let (_, spec) = base.build()?;
    let cfg = a.eval.config(spec.c())?.without_traces();
    let seeds = parse_seeds(&a.seeds)?;
    let res = sweep(&base, &seeds, &a.deviations, &cfg, &[])?;
    std::fs::create_dir_all(&a.out)?;
    res.write_runs_csv(create(&a.out.join("runs.csv"))?)?;
    res.write_aggregate_csv(create(&a.out.join("aggregate.csv"))?)?;
    let max = res.aggregates.last().expect("max row");
    println!("mean max rho_hat = {} ± {} over {} seeds", max.mean, max.stderr, max.n);
    Ok(())
}

fn cmd_fig2(a: Fig2Args) -> Result<()> {
    let mut cfg = Fig2Config::default();
    if let Some(t) = a.steps {
        cfg.steps = t;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    let res = fig2_analog(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    res.write_samples_csv(create(&a.out.join("samples.csv"))?)?;
    res.write_summary_csv(create(&a.out.join("summary.csv"))?)?;
    res.forgetful.write_runs_csv(create(&a.out.join("forgetful_runs.csv"))?)?;
    res.competent.write_runs_csv(create(&a.out.join("competent_runs.csv"))?)?;
    for p in res.forgetful.predicates.iter().chain(&res.competent.predicates) {
        println!(
            "{}: {}/{} seeds (need {}) {}",
            p.predicate.name,
            p.hits,
            cfg.seeds.len(),
            p.predicate.required,
            if p.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}

/// Reads `key = value` lines into `--key=value` tokens.
fn config_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        map.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(map.into_iter().map(|(k, v)| format!("--{k}={v}")).collect())
}

/// Splices config-file tokens directly after the subcommand so flags given
/// on the command line override them.
fn with_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = it.next();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let tokens = config_tokens(Path::new(&path))?;
    let sub = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 2).unwrap_or(rest.len());
    rest.splice(sub..sub, tokens);
    Ok(rest)
}

fn init_threads() {
    if let Some(n) = std::env::var("DEVREGRET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let args = match with_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_io() { 1 } else { 2 });
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Fig2Analog(a) => cmd_fig2(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}
