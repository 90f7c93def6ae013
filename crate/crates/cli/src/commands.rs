//! Command implementations: each consumes a resolved config, writes its
//! artifacts (plus the config itself) into the output directory, and prints
//! a short digest.

use std::fs;
use std::path::Path;

use serde::Serialize;

use diffog_core::baselines::{residual_train, ResidualConfig};
use diffog_core::diffog::{
    train_dataset, train_refine, BoundSchedule, DiffogConfig, DiffogModel, TrainConfig,
    TrainRecord,
};
use diffog_core::experiments::{
    alpha_sweep, bound_sweep, compare_processors, diagonality_trace, executed_delta_series,
    phase_metrics, run_single, BenchOptions, ProcessorSpec, RolloutEval, SweepRow,
    VIOLATION_TOL,
};
use diffog_core::io as core_io;
use diffog_core::metrics::{summarize, BoundCheck};
use diffog_core::spd::VariantKind;
use diffog_core::synth::{gen_demos, DemoDataset, SynthTaskSpec, TaskKind};
use diffog_core::Error as CoreError;

use crate::config::*;
use crate::svg::{line_plot, Series};

pub enum CliError {
    Config(String),
    Convergence(String),
    MissingArtifact(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Convergence(m)
            | CliError::MissingArtifact(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingArtifact(e.to_string())
            }
            CoreError::QpNonConvergence { .. } | CoreError::Divergence { .. } => {
                CliError::Convergence(e.to_string())
            }
            CoreError::InvalidBounds { .. }
            | CoreError::BadSchedule { .. }
            | CoreError::BadHeadSplit { .. }
            | CoreError::EmptySelection
            | CoreError::BadSelectionIndex { .. }
            | CoreError::DuplicateSelectionIndex { .. }
            | CoreError::NotTrainable
            | CoreError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            CoreError::BadCheckpoint { .. } => CliError::MissingArtifact(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn load_dataset(dir: &Path) -> Result<DemoDataset, CliError> {
    if !dir.join("episodes.jsonl").exists() {
        return Err(CliError::MissingArtifact(format!(
            "dataset not found under {dir:?} (expected episodes.jsonl)"
        )));
    }
    Ok(core_io::read_dataset(dir)?)
}

pub fn gen_data(config: &GenDataConfig) -> CliResult {
    let spec = config.task_spec();
    let dataset = gen_demos(&spec, config.episodes, config.seed)?;
    core_io::write_dataset(&dataset, &config.out)?;
    crate::config::archive(&RunConfig::GenData(config.clone()), &config.out)?;

    let total_steps: usize = dataset.episodes.iter().map(|e| e.actions.len()).sum();
    // Digest: episode count plus a first-order roughness summary.
    let mut std_sum = 0.0;
    for episode in 0..dataset.episodes.len() {
        let len = dataset.episodes[episode].actions.len();
        let chunk = dataset.normalized_chunk(episode, 0, len);
        let mat = chunk.as_matrix();
        if let Ok(deltas) = diffog_core::metrics::derivative_series(&mat, 1.0, 1) {
            std_sum += summarize(&deltas, 1, None).avg_std;
        }
    }
    println!(
        "wrote {} episodes ({} steps, {} action dims) to {:?}",
        dataset.episodes.len(),
        total_steps,
        dataset.meta.action_dim,
        config.out
    );
    println!(
        "task {} seed {} | mean per-episode delta std {:.5}",
        dataset.meta.task,
        config.seed,
        std_sum / dataset.episodes.len().max(1) as f64
    );
    Ok(())
}

fn write_train_csv(records: &[TrainRecord], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("step,loss,constraint_activity,wall_time_s\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.loss, r.constraint_activity, r.wall_time_s
        ));
    }
    fs::write(path, out)
}

fn diffog_config_from(config: &TrainRunConfig, dataset: &DemoDataset) -> DiffogConfig {
    let mut cfg = DiffogConfig::new(
        config.horizon,
        dataset.meta.action_dim,
        dataset.meta.selected.clone(),
    );
    cfg.alpha = config.alpha;
    cfg.bound = config.bound;
    cfg.value_bound = config.value_bound;
    cfg.exec_horizon = config.exec_horizon;
    cfg.embed_dim = config.embed_dim;
    cfg.feedforward_dim = config.feedforward_dim;
    cfg.heads = config.heads;
    cfg.layers = config.layers;
    cfg.dropout = config.dropout;
    cfg.passthrough = config.passthrough;
    cfg.train = TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        steps: config.steps,
        grad_clip: config.grad_clip,
        seed: config.seed,
    };
    cfg
}

pub fn train(config: &TrainRunConfig) -> CliResult {
    let dataset = load_dataset(&config.data)?;
    fs::create_dir_all(&config.out)?;
    crate::config::archive(&RunConfig::Train(config.clone()), &config.out)?;

    if config.mode == TrainMode::StaticNoop {
        println!("static variant has no trainable parameters; nothing to do");
        return Ok(());
    }

    if config.mode == TrainMode::Residual {
        let mut rescfg = ResidualConfig::compact(config.alpha, config.residual_width);
        rescfg.train = TrainConfig {
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            steps: config.steps,
            grad_clip: config.grad_clip,
            seed: config.seed,
        };
        let (policy, records) = residual_train(
            &dataset,
            &dataset.selection(),
            config.horizon,
            rescfg,
            config.seed,
        )?;
        write_train_csv(&records, &config.out.join("train.csv"))?;
        core_io::save_residual_checkpoint(
            &policy,
            config.seed,
            &dataset.stats,
            &config.out.join("residual_checkpoint.json"),
        )?;
        println!(
            "residual training done: {} steps, final loss {:.6}",
            records.len(),
            records.last().map(|r| r.loss).unwrap_or(f64::NAN)
        );
        return Ok(());
    }

    let mut cfg = diffog_config_from(config, &dataset);
    cfg.variant = match config.mode {
        TrainMode::Matrix => VariantKind::MatrixLearning,
        _ => VariantKind::Transformer,
    };
    let mut model = DiffogModel::init(cfg, config.seed)?;
    let outcome = match config.mode {
        TrainMode::Refine => {
            let policy = config.base_policy.stub();
            train_refine(&mut model, &policy, &dataset)?
        }
        _ => train_dataset(&mut model, &dataset)?,
    };
    write_train_csv(&outcome.records, &config.out.join("train.csv"))?;
    core_io::save_checkpoint(&model, &dataset.stats, &config.out.join("checkpoint.json"))?;
    if outcome.diverged {
        return Err(CliError::Convergence(format!(
            "training diverged after {} steps; last finite checkpoint retained at {:?}",
            outcome.records.len(),
            config.out.join("checkpoint.json")
        )));
    }
    println!(
        "training done: {} steps, final loss {:.6}, checkpoint at {:?}",
        outcome.records.len(),
        outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        config.out.join("checkpoint.json")
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalAggregate {
    episodes: usize,
    success_rate: f64,
    avg_max_delta: f64,
    avg_std_delta: f64,
    violation_count: usize,
    max_violation: f64,
    mse_to_reference: f64,
}

fn task_from_dataset(dataset: &DemoDataset) -> Result<SynthTaskSpec, CliError> {
    let kind = match dataset.meta.task.as_str() {
        "reach2d" => TaskKind::Reach2d,
        "waypoint-chain" => TaskKind::WaypointChain,
        "jerky-replay" => TaskKind::JerkyReplay,
        other => {
            return Err(CliError::Config(format!(
                "dataset task `{other}` is not a synthetic task"
            )))
        }
    };
    let horizon = dataset
        .episodes
        .first()
        .map(|e| e.actions.len())
        .unwrap_or(120);
    let mut spec = SynthTaskSpec::new(kind, dataset.meta.seed);
    spec.horizon = horizon;
    Ok(spec)
}

fn write_sweep(path_base: &Path, name: &str, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut csv = String::from("value,success_rate,avg_max_delta,avg_std_delta,violation_count\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value, r.success_rate, r.avg_max_delta, r.avg_std_delta, r.violation_count
        ));
    }
    fs::write(path_base.join(format!("sweep_{name}.csv")), csv)?;
    fs::write(
        path_base.join(format!("sweep_{name}.svg")),
        sweep_svg(name, rows),
    )
}

fn sweep_svg(name: &str, rows: &[SweepRow]) -> String {
    line_plot(
        &format!("{name} sweep"),
        name,
        "per-step delta",
        &[
            Series {
                label: "avg max |delta|",
                points: rows.iter().map(|r| (r.value, r.avg_max_delta)).collect(),
            },
            Series {
                label: "avg std",
                points: rows.iter().map(|r| (r.value, r.avg_std_delta)).collect(),
            },
        ],
    )
}

pub fn eval(config: &EvalConfig) -> CliResult {
    let dataset = load_dataset(&config.data)?;
    if !config.checkpoint.exists() {
        return Err(CliError::MissingArtifact(format!(
            "checkpoint {:?} not found",
            config.checkpoint
        )));
    }
    let (model, _norm) = core_io::load_checkpoint(&config.checkpoint)?;
    fs::create_dir_all(&config.out)?;
    crate::config::archive(&RunConfig::Eval(config.clone()), &config.out)?;
    let task = task_from_dataset(&dataset)?;
    let inits: Vec<u64> = (0..config.inits as u64).collect();

    // Per-episode metrics across policy seeds.
    let mut csv = String::from(
        "policy_seed,init,success,steps,avg_max_delta,avg_std_delta,violations,max_violation,mse\n",
    );
    let mut successes = 0usize;
    let mut episodes = 0usize;
    let mut agg_max = 0.0;
    let mut agg_std = 0.0;
    let mut violations = 0usize;
    let mut worst_violation = 0.0f64;
    let mut mse_sum = 0.0;
    for &pseed in &config.policy_seeds {
        let mut policy_spec = config.base_policy.clone();
        policy_spec.seed = pseed;
        let policy = policy_spec.stub();
        for &init in &inits {
            let result = run_single(
                &task,
                &dataset,
                &policy,
                &ProcessorSpec::Diffog {
                    model: &model,
                    schedule: None,
                },
                model.config.bound,
                model.config.horizon,
                model.config.exec_horizon,
                init,
            )?;
            episodes += 1;
            if result.success {
                successes += 1;
            }
            let mse = result.mse_to_reference(&dataset.meta.selected);
            mse_sum += mse;
            let report = executed_delta_series(&result, &dataset)
                .map(|d| summarize(&d, 1, Some(BoundCheck::new(model.config.bound, VIOLATION_TOL))));
            let (max_d, std_d, viol, maxv) = report
                .map(|r| (r.avg_max, r.avg_std, r.violation_count, r.max_violation))
                .unwrap_or((0.0, 0.0, 0, 0.0));
            agg_max += max_d;
            agg_std += std_d;
            violations += viol;
            worst_violation = worst_violation.max(maxv);
            csv.push_str(&format!(
                "{pseed},{init},{},{},{max_d},{std_d},{viol},{maxv},{mse}\n",
                result.success as u8, result.steps
            ));
        }
    }
    fs::write(config.out.join("episodes.csv"), csv)?;
    let aggregate = EvalAggregate {
        episodes,
        success_rate: successes as f64 / episodes.max(1) as f64,
        avg_max_delta: agg_max / episodes.max(1) as f64,
        avg_std_delta: agg_std / episodes.max(1) as f64,
        violation_count: violations,
        max_violation: worst_violation,
        mse_to_reference: mse_sum / episodes.max(1) as f64,
    };
    fs::write(
        config.out.join("aggregate.json"),
        serde_json::to_string_pretty(&aggregate).expect("aggregate serializes"),
    )?;
    println!(
        "eval: {} episodes, success {:.3}, avg max delta {:.4}, avg std {:.4}, violations {}",
        aggregate.episodes,
        aggregate.success_rate,
        aggregate.avg_max_delta,
        aggregate.avg_std_delta,
        aggregate.violation_count
    );

    let policy = {
        let mut spec = config.base_policy.clone();
        spec.seed = config.policy_seeds[0];
        spec.stub()
    };
    if let Some(alphas) = &config.sweep_alpha {
        let rows = alpha_sweep(&model, &task, &dataset, &policy, alphas, &inits)?;
        write_sweep(&config.out, "alpha", &rows)?;
        for r in &rows {
            println!(
                "alpha {:>6}: success {:.3} max {:.4} std {:.5} violations {}",
                r.value, r.success_rate, r.avg_max_delta, r.avg_std_delta, r.violation_count
            );
        }
    }
    if let Some(bounds) = &config.sweep_bound {
        let rows = bound_sweep(&model, &task, &dataset, &policy, bounds, &inits)?;
        write_sweep(&config.out, "bound", &rows)?;
        for r in &rows {
            println!(
                "bound {:>6}: success {:.3} max {:.4} std {:.5} violations {}",
                r.value, r.success_rate, r.avg_max_delta, r.avg_std_delta, r.violation_count
            );
        }
    }
    if let Some(text) = &config.schedule {
        let schedule = BoundSchedule::parse(text)?;
        let mut phase_rows: Vec<(usize, f64, usize, f64, f64)> = Vec::new();
        let mut scheduled_successes = 0usize;
        for &init in &inits {
            let result = run_single(
                &task,
                &dataset,
                &policy,
                &ProcessorSpec::Diffog {
                    model: &model,
                    schedule: Some(&schedule),
                },
                model.config.bound,
                model.config.horizon,
                model.config.exec_horizon,
                init,
            )?;
            if result.success {
                scheduled_successes += 1;
            }
            for pm in phase_metrics(&result, &dataset, &schedule) {
                match phase_rows.iter_mut().find(|row| row.0 == pm.phase) {
                    Some(row) => {
                        row.2 += pm.steps;
                        row.3 = row.3.max(pm.max_delta);
                        row.4 += pm.std_delta * pm.steps as f64;
                    }
                    None => phase_rows.push((
                        pm.phase,
                        pm.bound,
                        pm.steps,
                        pm.max_delta,
                        pm.std_delta * pm.steps as f64,
                    )),
                }
            }
        }
        phase_rows.sort_by_key(|row| row.0);
        let mut csv = String::from("phase,bound,steps,max_delta,std_delta\n");
        for (phase, bound, steps, max_delta, std_weighted) in &phase_rows {
            csv.push_str(&format!(
                "{phase},{bound},{steps},{max_delta},{}\n",
                std_weighted / (*steps).max(1) as f64
            ));
        }
        fs::write(config.out.join("schedule.csv"), csv)?;
        println!(
            "schedule success {:.3} over {} inits; per-phase rows in schedule.csv",
            scheduled_successes as f64 / inits.len().max(1) as f64,
            inits.len()
        );
    }
    if config.diagonality_trace {
        let trace = diagonality_trace(&model, &task, &dataset, &policy, 0)?;
        let mut csv = String::from("exec_step,diagonality\n");
        for (step, score) in &trace {
            csv.push_str(&format!("{step},{score}\n"));
        }
        fs::write(config.out.join("diagonality.csv"), csv)?;
        fs::write(
            config.out.join("diagonality.svg"),
            diagonality_svg(&trace),
        )?;
    }
    Ok(())
}

fn diagonality_svg(trace: &[(usize, f64)]) -> String {
    line_plot(
        "cost-matrix diagonality per replan",
        "executed step",
        "diagonality score",
        &[Series {
            label: "diagonality",
            points: trace.iter().map(|(s, v)| (*s as f64, *v)).collect(),
        }],
    )
}

pub fn compare(config: &CompareConfig) -> CliResult {
    let dataset = load_dataset(&config.data)?;
    for (what, path) in [
        ("checkpoint", &config.checkpoint),
        ("residual checkpoint", &config.residual_checkpoint),
    ] {
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!("{what} {path:?} not found")));
        }
    }
    let (model, _) = core_io::load_checkpoint(&config.checkpoint)?;
    let (residual, _) = core_io::load_residual_checkpoint(&config.residual_checkpoint)?;
    fs::create_dir_all(&config.out)?;
    crate::config::archive(&RunConfig::Compare(config.clone()), &config.out)?;
    let task = task_from_dataset(&dataset)?;
    let inits: Vec<u64> = (0..config.inits as u64).collect();
    let options = BenchOptions {
        bound: config.bound,
        plan_horizon: model.config.horizon,
        exec_horizon: model.config.exec_horizon,
    };

    // Average rows across policy seeds.
    let mut rows: Vec<RolloutEval> = Vec::new();
    for &pseed in &config.policy_seeds {
        let mut spec = config.base_policy.clone();
        spec.seed = pseed;
        let policy = spec.stub();
        let seed_rows = compare_processors(
            &task,
            &dataset,
            &policy,
            Some(&model),
            Some(&residual),
            config.penalty_params(),
            &options,
            &inits,
        )?;
        if rows.is_empty() {
            rows = seed_rows;
        } else {
            for (acc, new) in rows.iter_mut().zip(seed_rows) {
                acc.episodes += new.episodes;
                acc.successes += new.successes;
                acc.success_rate = acc.successes as f64 / acc.episodes as f64;
                let w_old = (acc.episodes - new.episodes) as f64 / acc.episodes as f64;
                let w_new = new.episodes as f64 / acc.episodes as f64;
                acc.avg_max_delta = acc.avg_max_delta * w_old + new.avg_max_delta * w_new;
                acc.avg_std_delta = acc.avg_std_delta * w_old + new.avg_std_delta * w_new;
                acc.mse_to_reference =
                    acc.mse_to_reference * w_old + new.mse_to_reference * w_new;
                acc.violation_count += new.violation_count;
                acc.max_violation = acc.max_violation.max(new.max_violation);
            }
        }
    }

    let mut csv =
        String::from("processor,success_rate,avg_max_delta,avg_std_delta,violations,max_violation,mse_to_reference\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.processor,
            r.success_rate,
            r.avg_max_delta,
            r.avg_std_delta,
            r.violation_count,
            r.max_violation,
            r.mse_to_reference
        ));
    }
    fs::write(config.out.join("compare.csv"), &csv)?;
    fs::write(
        config.out.join("compare.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;

    match config.format {
        OutputFormat::Csv => print!("{csv}"),
        OutputFormat::Json => {
            println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"))
        }
        OutputFormat::Table => {
            println!(
                "{:>9} | {:>8} | {:>9} | {:>9} | {:>10} | {:>12}",
                "processor", "success", "max delta", "std delta", "violations", "mse-to-ref"
            );
            for r in &rows {
                println!(
                    "{:>9} | {:>8.3} | {:>9.4} | {:>9.4} | {:>10} | {:>12.6}",
                    r.processor.to_string(),
                    r.success_rate,
                    r.avg_max_delta,
                    r.avg_std_delta,
                    r.violation_count,
                    r.mse_to_reference
                );
            }
        }
    }
    Ok(())
}

/// Rebuilds the derived artifacts (aggregate JSON, SVG plots) from the CSVs
/// in a run directory.
pub fn report(config: &ReportConfig) -> CliResult {
    let dir = &config.dir;
    if !dir.exists() {
        return Err(CliError::MissingArtifact(format!("directory {dir:?} not found")));
    }
    let mut regenerated = Vec::new();

    let episodes_csv = dir.join("episodes.csv");
    if episodes_csv.exists() {
        let text = fs::read_to_string(&episodes_csv)?;
        let mut episodes = 0usize;
        let mut successes = 0usize;
        let (mut max_sum, mut std_sum, mut mse_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut violations = 0usize;
        let mut worst = 0.0f64;
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 9 {
                continue;
            }
            episodes += 1;
            successes += fields[2].parse::<u8>().unwrap_or(0) as usize;
            max_sum += fields[4].parse::<f64>().unwrap_or(0.0);
            std_sum += fields[5].parse::<f64>().unwrap_or(0.0);
            violations += fields[6].parse::<usize>().unwrap_or(0);
            worst = worst.max(fields[7].parse::<f64>().unwrap_or(0.0));
            mse_sum += fields[8].parse::<f64>().unwrap_or(0.0);
        }
        let aggregate = EvalAggregate {
            episodes,
            success_rate: successes as f64 / episodes.max(1) as f64,
            avg_max_delta: max_sum / episodes.max(1) as f64,
            avg_std_delta: std_sum / episodes.max(1) as f64,
            violation_count: violations,
            max_violation: worst,
            mse_to_reference: mse_sum / episodes.max(1) as f64,
        };
        fs::write(
            dir.join("aggregate.json"),
            serde_json::to_string_pretty(&aggregate).expect("aggregate serializes"),
        )?;
        regenerated.push("aggregate.json");
    }

    for name in ["alpha", "bound"] {
        let csv_path = dir.join(format!("sweep_{name}.csv"));
        if csv_path.exists() {
            let text = fs::read_to_string(&csv_path)?;
            let mut rows = Vec::new();
            for line in text.lines().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() < 5 {
                    continue;
                }
                rows.push(SweepRow {
                    value: fields[0].parse().unwrap_or(0.0),
                    success_rate: fields[1].parse().unwrap_or(0.0),
                    avg_max_delta: fields[2].parse().unwrap_or(0.0),
                    avg_std_delta: fields[3].parse().unwrap_or(0.0),
                    violation_count: fields[4].parse().unwrap_or(0),
                });
            }
            fs::write(dir.join(format!("sweep_{name}.svg")), sweep_svg(name, &rows))?;
            regenerated.push(if name == "alpha" {
                "sweep_alpha.svg"
            } else {
                "sweep_bound.svg"
            });
        }
    }

    let diag_csv = dir.join("diagonality.csv");
    if diag_csv.exists() {
        let text = fs::read_to_string(&diag_csv)?;
        let mut trace = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() == 2 {
                trace.push((
                    fields[0].parse::<usize>().unwrap_or(0),
                    fields[1].parse::<f64>().unwrap_or(0.0),
                ));
            }
        }
        fs::write(dir.join("diagonality.svg"), diagonality_svg(&trace))?;
        regenerated.push("diagonality.svg");
    }

    if regenerated.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "no recognized CSVs under {dir:?}"
        )));
    }
    println!("regenerated: {}", regenerated.join(", "));
    Ok(())
}
