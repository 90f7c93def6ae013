//! Experiment harness shared by the command-line front end and the
//! acceptance suite: batched rollout evaluation per processor, smoothing and
//! bound sweeps, the refine-mode variant-separation study, phase metrics for
//! time-varying bound schedules, and diagonality traces.

use serde::{Deserialize, Serialize};

use crate::baselines::{
    ClipProcessor, PenaltyParams, PenaltyProcessor, ResidualPolicy, ResidualProcessor,
};
use crate::diffog::{
    train_refine, BoundSchedule, DiffogModel, DiffogProcessor, TrainOutcome,
};
use crate::error::Result;
use crate::metrics::{derivative_series, summarize, BoundCheck, MetricReport};
use crate::spd::diagonality;
use crate::synth::{
    rollout, BasePolicyStub, ChunkProcessor, DemoDataset, NoProcessor, RolloutResult,
    SynthTaskSpec,
};
use crate::tensor::Matrix;
use crate::trajectory::ActionChunk;

/// Tolerance for counting hard-constraint violations.
pub const VIOLATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorKind {
    None,
    Diffog,
    Clip,
    Penalty,
    Residual,
}

impl std::fmt::Display for ProcessorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProcessorKind::None => "none",
            ProcessorKind::Diffog => "diffog",
            ProcessorKind::Clip => "clip",
            ProcessorKind::Penalty => "penalty",
            ProcessorKind::Residual => "residual",
        };
        f.write_str(s)
    }
}

/// What to run on top of the base policy during rollouts.
pub enum ProcessorSpec<'a> {
    None,
    Diffog {
        model: &'a DiffogModel,
        schedule: Option<&'a BoundSchedule>,
    },
    Clip,
    Penalty(PenaltyParams),
    Residual(&'a ResidualPolicy),
}

impl ProcessorSpec<'_> {
    pub fn kind(&self) -> ProcessorKind {
        match self {
            ProcessorSpec::None => ProcessorKind::None,
            ProcessorSpec::Diffog { .. } => ProcessorKind::Diffog,
            ProcessorSpec::Clip => ProcessorKind::Clip,
            ProcessorSpec::Penalty(_) => ProcessorKind::Penalty,
            ProcessorSpec::Residual(_) => ProcessorKind::Residual,
        }
    }
}

/// Aggregated rollout evaluation for one processor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutEval {
    pub processor: ProcessorKind,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Episode-averaged max |per-step delta| on normalized selected dims.
    pub avg_max_delta: f64,
    /// Episode-averaged std of the per-step delta.
    pub avg_std_delta: f64,
    /// Total entries exceeding the bound by more than the tolerance.
    pub violation_count: usize,
    pub max_violation: f64,
    /// Mean squared distance of executed to reference positions.
    pub mse_to_reference: f64,
}

/// Normalized per-step delta series of the executed selected dimensions.
pub fn executed_delta_series(result: &RolloutResult, dataset: &DemoDataset) -> Option<Matrix> {
    let selected = &dataset.meta.selected;
    let steps = result.executed.rows();
    if steps < 2 {
        return None;
    }
    let normalized = Matrix::from_fn(steps, selected.len(), |i, j| {
        let dim = selected[j];
        let row = result.executed.row_slice(i);
        let scale = dataset.stats.delta_scale(dim);
        if scale == 0.0 {
            0.0
        } else {
            (row[dim] - dataset.stats.min[dim]) * scale - 1.0
        }
    });
    // dt = 1: deltas per step, directly comparable to the normalized bound.
    derivative_series(&normalized, 1.0, 1).ok()
}

/// Runs one rollout per init seed and aggregates metrics against `bound`.
pub fn run_rollouts(
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    processor: &ProcessorSpec,
    bound: f64,
    plan_horizon: usize,
    exec_horizon: usize,
    inits: &[u64],
) -> Result<RolloutEval> {
    let mut successes = 0;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut mse_total = 0.0;
    let check = BoundCheck::new(bound, VIOLATION_TOL);

    for &init in inits {
        let result = run_single(
            task,
            dataset,
            policy,
            processor,
            bound,
            plan_horizon,
            exec_horizon,
            init,
        )?;
        if result.success {
            successes += 1;
        }
        mse_total += result.mse_to_reference(&dataset.meta.selected);
        if let Some(deltas) = executed_delta_series(&result, dataset) {
            reports.push(summarize(&deltas, 1, Some(check)));
        }
    }

    let episodes = inits.len();
    let mut eval = RolloutEval {
        processor: processor.kind(),
        episodes,
        successes,
        success_rate: successes as f64 / episodes.max(1) as f64,
        avg_max_delta: 0.0,
        avg_std_delta: 0.0,
        violation_count: 0,
        max_violation: 0.0,
        mse_to_reference: mse_total / episodes.max(1) as f64,
    };
    let n = reports.len() as f64;
    for r in &reports {
        eval.avg_max_delta += r.avg_max / n;
        eval.avg_std_delta += r.avg_std / n;
        eval.violation_count += r.violation_count;
        eval.max_violation = eval.max_violation.max(r.max_violation);
    }
    Ok(eval)
}

/// One rollout with a freshly constructed processor; `bound` is the
/// normalized per-step bound clip/penalty enforce (the layer carries its
/// own inside its config).
pub fn run_single(
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    processor: &ProcessorSpec,
    bound: f64,
    plan_horizon: usize,
    exec_horizon: usize,
    init: u64,
) -> Result<RolloutResult> {
    let selected = dataset.meta.selected.clone();
    let mut proc: Box<dyn ChunkProcessor> = match processor {
        ProcessorSpec::None => Box::new(NoProcessor),
        ProcessorSpec::Diffog { model, schedule } => {
            Box::new(DiffogProcessor::new(model, &dataset.stats, *schedule))
        }
        ProcessorSpec::Clip => Box::new(ClipProcessor::new(&dataset.stats, selected, bound)),
        ProcessorSpec::Penalty(params) => Box::new(PenaltyProcessor::new(
            &dataset.stats,
            selected,
            bound,
            params.clone(),
        )),
        ProcessorSpec::Residual(policy_net) => {
            Box::new(ResidualProcessor::new(policy_net, &dataset.stats))
        }
    };
    rollout(
        task,
        init,
        policy,
        Some(dataset),
        proc.as_mut(),
        plan_horizon,
        exec_horizon,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Normalized per-step bound shared by every constrained processor.
    pub bound: f64,
    pub plan_horizon: usize,
    pub exec_horizon: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            bound: 0.1,
            plan_horizon: 8,
            exec_horizon: 4,
        }
    }
}

/// Compare every processor on the same task/policy/initializations.
pub fn compare_processors(
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    model: Option<&DiffogModel>,
    residual: Option<&ResidualPolicy>,
    penalty: PenaltyParams,
    options: &BenchOptions,
    inits: &[u64],
) -> Result<Vec<RolloutEval>> {
    let mut rows = Vec::new();
    let mut specs: Vec<ProcessorSpec> = vec![ProcessorSpec::None];
    if let Some(m) = model {
        specs.push(ProcessorSpec::Diffog {
            model: m,
            schedule: None,
        });
    }
    specs.push(ProcessorSpec::Clip);
    specs.push(ProcessorSpec::Penalty(penalty));
    if let Some(r) = residual {
        specs.push(ProcessorSpec::Residual(r));
    }
    for spec in &specs {
        rows.push(run_rollouts(
            task,
            dataset,
            policy,
            spec,
            options.bound,
            options.plan_horizon,
            options.exec_horizon,
            inits,
        )?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept value (alpha or bound).
    pub value: f64,
    pub success_rate: f64,
    pub avg_max_delta: f64,
    pub avg_std_delta: f64,
    pub violation_count: usize,
}

/// Evaluates a trained model at several smoothing weights; alpha is a
/// manual knob, so no retraining is involved.
pub fn alpha_sweep(
    model: &DiffogModel,
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    alphas: &[f64],
    inits: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut variant = model.clone();
        variant.config.alpha = alpha;
        let eval = run_rollouts(
            task,
            dataset,
            policy,
            &ProcessorSpec::Diffog {
                model: &variant,
                schedule: None,
            },
            variant.config.bound,
            variant.config.horizon,
            variant.config.exec_horizon,
            inits,
        )?;
        rows.push(SweepRow {
            value: alpha,
            success_rate: eval.success_rate,
            avg_max_delta: eval.avg_max_delta,
            avg_std_delta: eval.avg_std_delta,
            violation_count: eval.violation_count,
        });
    }
    Ok(rows)
}

/// Evaluates a trained model at several normalized bounds.
pub fn bound_sweep(
    model: &DiffogModel,
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    bounds: &[f64],
    inits: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &bound in bounds {
        let mut variant = model.clone();
        variant.config.bound = bound;
        let eval = run_rollouts(
            task,
            dataset,
            policy,
            &ProcessorSpec::Diffog {
                model: &variant,
                schedule: None,
            },
            bound,
            variant.config.horizon,
            variant.config.exec_horizon,
            inits,
        )?;
        rows.push(SweepRow {
            value: bound,
            success_rate: eval.success_rate,
            avg_max_delta: eval.avg_max_delta,
            avg_std_delta: eval.avg_std_delta,
            violation_count: eval.violation_count,
        });
    }
    Ok(rows)
}

/// Deterministic evaluation loss of a model on fixed dataset windows;
/// inputs come from the policy (refine setting) or the dataset itself.
pub fn eval_loss(
    model: &DiffogModel,
    dataset: &DemoDataset,
    policy: Option<&BasePolicyStub>,
    windows: &[(usize, usize)],
) -> Result<f64> {
    let horizon = model.config.horizon;
    let mut total = 0.0;
    for &(episode, start) in windows {
        let target = dataset.normalized_chunk(episode, start, horizon);
        let input = match policy {
            Some(p) => {
                let raw = p.chunk(
                    &dataset.episodes[episode],
                    Some(dataset),
                    start,
                    horizon,
                    dataset.meta.dt,
                );
                let mut values = Vec::with_capacity(horizon * dataset.meta.action_dim);
                for k in 0..horizon {
                    values.extend(dataset.stats.normalize(raw.step(k)));
                }
                ActionChunk::new(horizon, dataset.meta.action_dim, values, dataset.meta.dt)?
            }
            None => target.clone(),
        };
        let output = model.forward(&input, None, None)?;
        total += crate::diffog::sample_loss(&output.values, &target.values);
    }
    Ok(total / windows.len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSeparation {
    pub transformer_loss: f64,
    pub matrix_learning_loss: f64,
    pub static_loss: f64,
}

/// Refine-mode study on an offset base policy: trains the transformer and
/// matrix-learning variants, evaluates all three on the same fixed windows.
pub fn offset_refine_experiment(
    template: &crate::diffog::DiffogConfig,
    dataset: &DemoDataset,
    offset: [f64; 2],
    seed: u64,
) -> Result<(VariantSeparation, TrainOutcome, TrainOutcome)> {
    use crate::spd::VariantKind;

    let policy = BasePolicyStub::new(crate::synth::PolicyMode::ReplayOffset { offset }, seed);
    let all_windows = dataset.windows(template.horizon);
    let eval_windows: Vec<(usize, usize)> = all_windows
        .iter()
        .step_by((all_windows.len() / 48).max(1))
        .copied()
        .collect();

    let mut transformer_cfg = template.clone();
    transformer_cfg.variant = VariantKind::Transformer;
    let mut transformer = DiffogModel::init(transformer_cfg, seed)?;
    let t_out = train_refine(&mut transformer, &policy, dataset)?;

    let mut matrix_cfg = template.clone();
    matrix_cfg.variant = VariantKind::MatrixLearning;
    let mut matrix = DiffogModel::init(matrix_cfg, seed)?;
    let m_out = train_refine(&mut matrix, &policy, dataset)?;

    let mut static_cfg = template.clone();
    static_cfg.variant = VariantKind::Static;
    let static_model = DiffogModel::init(static_cfg, seed)?;

    let separation = VariantSeparation {
        transformer_loss: eval_loss(&transformer, dataset, Some(&policy), &eval_windows)?,
        matrix_learning_loss: eval_loss(&matrix, dataset, Some(&policy), &eval_windows)?,
        static_loss: eval_loss(&static_model, dataset, Some(&policy), &eval_windows)?,
    };
    Ok((separation, t_out, m_out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub bound: f64,
    pub steps: usize,
    pub max_delta: f64,
    pub std_delta: f64,
}

/// Groups the executed per-step deltas of one rollout by schedule phase.
/// Delta `k` (between steps `k-1` and `k`) is attributed to the phase of
/// step `k`.
pub fn phase_metrics(
    result: &RolloutResult,
    dataset: &DemoDataset,
    schedule: &BoundSchedule,
) -> Vec<PhaseMetrics> {
    let deltas = match executed_delta_series(result, dataset) {
        Some(d) => d,
        None => return Vec::new(),
    };
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); schedule.phases.len()];
    for i in 0..deltas.rows() {
        let phase = schedule.phase_at(i + 1);
        for j in 0..deltas.cols() {
            buckets[phase].push(deltas.get(i, j));
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .filter(|(_, values)| !values.is_empty())
        .map(|(phase, values)| {
            let max_delta = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            PhaseMetrics {
                phase,
                bound: schedule.phases[phase].bound,
                steps: values.len(),
                max_delta,
                std_delta: var.sqrt(),
            }
        })
        .collect()
}

/// Per-replan diagonality scores of the generated cost matrix during one
/// rollout.
pub fn diagonality_trace(
    model: &DiffogModel,
    task: &SynthTaskSpec,
    dataset: &DemoDataset,
    policy: &BasePolicyStub,
    init: u64,
) -> Result<Vec<(usize, f64)>> {
    struct Tracing<'a> {
        inner: DiffogProcessor<'a>,
        model: &'a DiffogModel,
        dataset: &'a DemoDataset,
        trace: Vec<(usize, f64)>,
    }
    impl ChunkProcessor for Tracing<'_> {
        fn process(
            &mut self,
            chunk: &ActionChunk,
            prev_selected: Option<&[f64]>,
            exec_step: usize,
        ) -> Result<ActionChunk> {
            let mut values = Vec::with_capacity(chunk.values.len());
            for k in 0..chunk.horizon {
                values.extend(self.dataset.stats.normalize(chunk.step(k)));
            }
            let normalized =
                ActionChunk::new(chunk.horizon, chunk.action_dim, values, chunk.dt)?;
            let cost = self.model.cost_matrix(&normalized)?;
            self.trace
                .push((exec_step, diagonality(&cost.cost, crate::spd::DEFAULT_EPSILON)));
            self.inner.process(chunk, prev_selected, exec_step)
        }
    }

    let mut proc = Tracing {
        inner: DiffogProcessor::new(model, &dataset.stats, None),
        model,
        dataset,
        trace: Vec::new(),
    };
    rollout(
        task,
        init,
        policy,
        Some(dataset),
        &mut proc,
        model.config.horizon,
        model.config.exec_horizon,
    )?;
    Ok(proc.trace)
}
