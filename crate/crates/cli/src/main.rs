//! Command-line front end tying every experiment to one reproducible
//! invocation. Each command archives its resolved configuration next to its
//! outputs; `--config` replays an archived file with flags taking priority.
//! `DIFFOG_SEED` overrides the seed globally.
//!
//! Exit codes: 0 success, 2 configuration error, 3 convergence failure,
//! 4 missing artifact.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::*;
use diffog_core::synth::TaskKind;

#[derive(Parser)]
#[command(name = "diffog", version, about = "Differentiable constrained trajectory optimization")]
struct Cli {
    /// JSON run-config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demonstration dataset.
    GenData(GenDataArgs),
    /// Train the layer (or a baseline) on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: rollouts, sweeps, schedules, diagnostics.
    Eval(EvalArgs),
    /// Side-by-side processor comparison on one task.
    Compare(CompareArgs),
    /// Regenerate plots and aggregates from the CSVs in a run directory.
    Report(ReportArgs),
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum TaskArg {
    Reach2d,
    WaypointChain,
    JerkyReplay,
}

impl From<TaskArg> for TaskKind {
    fn from(value: TaskArg) -> Self {
        match value {
            TaskArg::Reach2d => TaskKind::Reach2d,
            TaskArg::WaypointChain => TaskKind::WaypointChain,
            TaskArg::JerkyReplay => TaskKind::JerkyReplay,
        }
    }
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    goal_tol: Option<f64>,
    #[arg(long)]
    jerk_amp: Option<f64>,
    #[arg(long)]
    jerk_period: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    value_bound: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    exec_horizon: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    feedforward: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    passthrough: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    base: Option<PolicyKind>,
    #[arg(long)]
    base_jerk_amp: Option<f64>,
    #[arg(long)]
    base_jerk_period: Option<usize>,
    #[arg(long, num_args = 2)]
    base_offset: Option<Vec<f64>>,
    #[arg(long)]
    residual_width: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    inits: Option<usize>,
    /// Comma-separated base-policy seeds.
    #[arg(long)]
    policy_seeds: Option<String>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    jerk_amp: Option<f64>,
    #[arg(long)]
    jerk_period: Option<usize>,
    /// Comma-separated smoothing weights, e.g. `0,1,4,16`.
    #[arg(long)]
    sweep_alpha: Option<String>,
    /// Comma-separated bounds, e.g. `0.05,0.1,0.2,0.3`.
    #[arg(long)]
    sweep_bound: Option<String>,
    /// Phased bounds, e.g. `0.05:40,0.1:40,0.2:40,0.3:rest`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    no_diagonality: bool,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    residual_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    inits: Option<usize>,
    #[arg(long)]
    policy_seeds: Option<String>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    jerk_amp: Option<f64>,
    #[arg(long)]
    jerk_period: Option<usize>,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    penalty_eta: Option<f64>,
    #[arg(long)]
    penalty_tol: Option<f64>,
    #[arg(long)]
    penalty_max_iter: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn env_seed() -> Option<u64> {
    std::env::var("DIFFOG_SEED").ok().and_then(|v| v.parse().ok())
}

fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad number `{v}`: {e}")))
        .collect()
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .map(|v| v.trim().parse::<u64>().map_err(|e| format!("bad seed `{v}`: {e}")))
        .collect()
}

fn default_policy() -> PolicySpec {
    PolicySpec {
        kind: PolicyKind::ReplayJerk,
        jerk_amp: 0.06,
        jerk_period: 3,
        offset: [0.08, -0.06],
        seed: 0,
    }
}

/// Pulls the matching command config out of a `--config` file, if given.
fn file_config(cli: &Cli) -> Result<Option<RunConfig>, String> {
    match &cli.config {
        Some(path) => config::load(path).map(Some),
        None => Ok(None),
    }
}

fn resolve_gen_data(args: &GenDataArgs, file: Option<RunConfig>) -> Result<GenDataConfig, String> {
    let base = match file {
        Some(RunConfig::GenData(cfg)) => Some(cfg),
        Some(_) => return Err("config file is not a gen-data config".into()),
        None => None,
    };
    let get = base.as_ref();
    Ok(GenDataConfig {
        task: args
            .task
            .map(TaskKind::from)
            .or(get.map(|c| c.task))
            .unwrap_or(TaskKind::WaypointChain),
        episodes: args.episodes.or(get.map(|c| c.episodes)).unwrap_or(30),
        horizon: args.horizon.or(get.map(|c| c.horizon)).unwrap_or(120),
        goal_tol: args.goal_tol.or(get.map(|c| c.goal_tol)).unwrap_or(0.06),
        jerk_amp: args.jerk_amp.or(get.map(|c| c.jerk_amp)).unwrap_or(0.0),
        jerk_period: args.jerk_period.or(get.map(|c| c.jerk_period)).unwrap_or(3),
        seed: env_seed()
            .or(args.seed)
            .or(get.map(|c| c.seed))
            .unwrap_or(0),
        out: args
            .out
            .clone()
            .or(get.map(|c| c.out.clone()))
            .ok_or("missing --out")?,
    })
}

fn resolve_train(args: &TrainArgs, file: Option<RunConfig>) -> Result<TrainRunConfig, String> {
    let base = match file {
        Some(RunConfig::Train(cfg)) => Some(cfg),
        Some(_) => return Err("config file is not a train config".into()),
        None => None,
    };
    let get = base.as_ref();
    let mut policy = get.map(|c| c.base_policy.clone()).unwrap_or_else(default_policy);
    if let Some(kind) = args.base {
        policy.kind = kind;
    }
    if let Some(amp) = args.base_jerk_amp {
        policy.jerk_amp = amp;
    }
    if let Some(period) = args.base_jerk_period {
        policy.jerk_period = period;
    }
    if let Some(offset) = &args.base_offset {
        policy.offset = [offset[0], offset[1]];
    }
    let seed = env_seed()
        .or(args.seed)
        .or(get.map(|c| c.seed))
        .unwrap_or(0);
    policy.seed = policy.seed.max(seed);
    Ok(TrainRunConfig {
        data: args
            .data
            .clone()
            .or(get.map(|c| c.data.clone()))
            .ok_or("missing --data")?,
        out: args
            .out
            .clone()
            .or(get.map(|c| c.out.clone()))
            .ok_or("missing --out")?,
        mode: args.mode.or(get.map(|c| c.mode)).unwrap_or(TrainMode::Dataset),
        alpha: args.alpha.or(get.map(|c| c.alpha)).unwrap_or(4.0),
        bound: args.bound.or(get.map(|c| c.bound)).unwrap_or(0.1),
        value_bound: args.value_bound.or(get.and_then(|c| c.value_bound)),
        horizon: args.horizon.or(get.map(|c| c.horizon)).unwrap_or(8),
        exec_horizon: args
            .exec_horizon
            .or(get.map(|c| c.exec_horizon))
            .unwrap_or(4),
        embed_dim: args.embed.or(get.map(|c| c.embed_dim)).unwrap_or(256),
        feedforward_dim: args
            .feedforward
            .or(args.embed)
            .or(get.map(|c| c.feedforward_dim))
            .unwrap_or(256),
        heads: args.heads.or(get.map(|c| c.heads)).unwrap_or(4),
        layers: args.layers.or(get.map(|c| c.layers)).unwrap_or(2),
        dropout: args.dropout.or(get.map(|c| c.dropout)).unwrap_or(0.1),
        passthrough: args.passthrough || get.map(|c| c.passthrough).unwrap_or(false),
        steps: args.steps.or(get.map(|c| c.steps)).unwrap_or(300),
        batch_size: args.batch.or(get.map(|c| c.batch_size)).unwrap_or(64),
        learning_rate: args.lr.or(get.map(|c| c.learning_rate)).unwrap_or(1e-4),
        grad_clip: args.grad_clip.or(get.map(|c| c.grad_clip)).unwrap_or(1.0),
        seed,
        base_policy: policy,
        residual_width: args
            .residual_width
            .or(get.map(|c| c.residual_width))
            .unwrap_or(256),
    })
}

fn resolve_policy(
    kind: Option<PolicyKind>,
    jerk_amp: Option<f64>,
    jerk_period: Option<usize>,
    base: Option<&PolicySpec>,
) -> PolicySpec {
    let mut policy = base.cloned().unwrap_or_else(default_policy);
    if let Some(k) = kind {
        policy.kind = k;
    }
    if let Some(a) = jerk_amp {
        policy.jerk_amp = a;
    }
    if let Some(p) = jerk_period {
        policy.jerk_period = p;
    }
    policy
}

fn resolve_eval(args: &EvalArgs, file: Option<RunConfig>) -> Result<EvalConfig, String> {
    let base = match file {
        Some(RunConfig::Eval(cfg)) => Some(cfg),
        Some(_) => return Err("config file is not an eval config".into()),
        None => None,
    };
    let get = base.as_ref();
    let policy_seeds = match (&args.policy_seeds, get) {
        (Some(text), _) => parse_seeds(text)?,
        (None, Some(c)) => c.policy_seeds.clone(),
        (None, None) => vec![0],
    };
    Ok(EvalConfig {
        data: args
            .data
            .clone()
            .or(get.map(|c| c.data.clone()))
            .ok_or("missing --data")?,
        checkpoint: args
            .checkpoint
            .clone()
            .or(get.map(|c| c.checkpoint.clone()))
            .ok_or("missing --checkpoint")?,
        out: args
            .out
            .clone()
            .or(get.map(|c| c.out.clone()))
            .ok_or("missing --out")?,
        inits: args.inits.or(get.map(|c| c.inits)).unwrap_or(50),
        policy_seeds,
        base_policy: resolve_policy(
            args.policy,
            args.jerk_amp,
            args.jerk_period,
            get.map(|c| &c.base_policy),
        ),
        sweep_alpha: match &args.sweep_alpha {
            Some(text) => Some(parse_list(text)?),
            None => get.and_then(|c| c.sweep_alpha.clone()),
        },
        sweep_bound: match &args.sweep_bound {
            Some(text) => Some(parse_list(text)?),
            None => get.and_then(|c| c.sweep_bound.clone()),
        },
        schedule: args.schedule.clone().or(get.and_then(|c| c.schedule.clone())),
        diagonality_trace: !args.no_diagonality
            && get.map(|c| c.diagonality_trace).unwrap_or(true),
    })
}

fn resolve_compare(args: &CompareArgs, file: Option<RunConfig>) -> Result<CompareConfig, String> {
    let base = match file {
        Some(RunConfig::Compare(cfg)) => Some(cfg),
        Some(_) => return Err("config file is not a compare config".into()),
        None => None,
    };
    let get = base.as_ref();
    let policy_seeds = match (&args.policy_seeds, get) {
        (Some(text), _) => parse_seeds(text)?,
        (None, Some(c)) => c.policy_seeds.clone(),
        (None, None) => vec![0],
    };
    Ok(CompareConfig {
        data: args
            .data
            .clone()
            .or(get.map(|c| c.data.clone()))
            .ok_or("missing --data")?,
        checkpoint: args
            .checkpoint
            .clone()
            .or(get.map(|c| c.checkpoint.clone()))
            .ok_or("missing --checkpoint")?,
        residual_checkpoint: args
            .residual_checkpoint
            .clone()
            .or(get.map(|c| c.residual_checkpoint.clone()))
            .ok_or("missing --residual-checkpoint")?,
        out: args
            .out
            .clone()
            .or(get.map(|c| c.out.clone()))
            .ok_or("missing --out")?,
        inits: args.inits.or(get.map(|c| c.inits)).unwrap_or(50),
        policy_seeds,
        base_policy: resolve_policy(
            args.policy,
            args.jerk_amp,
            args.jerk_period,
            get.map(|c| &c.base_policy),
        ),
        bound: args.bound.or(get.map(|c| c.bound)).unwrap_or(0.1),
        penalty_eta: args.penalty_eta.or(get.map(|c| c.penalty_eta)).unwrap_or(0.1),
        penalty_tol: args
            .penalty_tol
            .or(get.map(|c| c.penalty_tol))
            .unwrap_or(1e-7),
        penalty_max_iter: args
            .penalty_max_iter
            .or(get.map(|c| c.penalty_max_iter))
            .unwrap_or(20_000),
        format: args.format.or(get.map(|c| c.format)).unwrap_or(OutputFormat::Table),
    })
}

fn run(cli: Cli) -> commands::CliResult {
    let file = file_config(&cli).map_err(commands::CliError::Config)?;
    match &cli.command {
        Command::GenData(args) => {
            let config = resolve_gen_data(args, file).map_err(commands::CliError::Config)?;
            commands::gen_data(&config)
        }
        Command::Train(args) => {
            let config = resolve_train(args, file).map_err(commands::CliError::Config)?;
            commands::train(&config)
        }
        Command::Eval(args) => {
            let config = resolve_eval(args, file).map_err(commands::CliError::Config)?;
            commands::eval(&config)
        }
        Command::Compare(args) => {
            let config = resolve_compare(args, file).map_err(commands::CliError::Config)?;
            commands::compare(&config)
        }
        Command::Report(args) => {
            let dir = args
                .dir
                .clone()
                .or_else(|| match file {
                    Some(RunConfig::Report(cfg)) => Some(cfg.dir),
                    _ => None,
                })
                .ok_or_else(|| commands::CliError::Config("missing --dir".into()))?;
            commands::report(&ReportConfig { dir })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
