//! The trainable refinement layer: cost generation, QP assembly and solve,
//! the solver node's backward rule, both supervised training modes, and
//! receding-horizon inference with linked chunk boundaries and optional
//! time-varying bound schedules.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, HeadInit, TransformerEncoder};
use crate::error::{Error, Result};
use crate::qp::{qp_backward, solve_qp, QpInstance, QpSolution};
use crate::spd::{self, SpdCost, VariantKind, DEFAULT_EPSILON};
use crate::synth::{rollout, BasePolicyStub, ChunkProcessor, DemoDataset, NormStats, RolloutResult, SynthTaskSpec};
use crate::tensor::{Adam, AdamConfig, Matrix, NodeId, ParamStore, Tape};
use crate::trajectory::{
    build_difference, build_selection, smoothness_cost, ActionChunk, AssembleMode, ConstraintSpec,
    SelectionSpec,
};

/// Slack threshold below which a constraint counts as active in training
/// diagnostics.
const ACTIVITY_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            steps: 300,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffogConfig {
    pub variant: VariantKind,
    /// Smoothing weight on the squared-derivative term.
    pub alpha: f64,
    /// Symmetric per-step bound on selected-dimension deltas, in normalized
    /// action units (this is `d_max * dt`).
    pub bound: f64,
    /// Optional symmetric per-step value bound on selected dimensions.
    pub value_bound: Option<f64>,
    /// Planning horizon T_p.
    pub horizon: usize,
    /// Execution horizon T_a (steps executed per replan).
    pub exec_horizon: usize,
    pub action_dim: usize,
    pub selected: Vec<usize>,
    pub embed_dim: usize,
    pub feedforward_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// When set, excluded dimensions bypass the QP entirely instead of
    /// riding along as unconstrained decision variables.
    pub passthrough: bool,
    pub train: TrainConfig,
}

impl DiffogConfig {
    /// Defaults for velocity-style tasks: alpha 4, normalized bound 0.1.
    pub fn new(horizon: usize, action_dim: usize, selected: Vec<usize>) -> Self {
        Self {
            variant: VariantKind::Transformer,
            alpha: 4.0,
            bound: 0.1,
            value_bound: None,
            horizon,
            exec_horizon: 8.min(horizon),
            action_dim,
            selected,
            embed_dim: 256,
            feedforward_dim: 256,
            heads: 4,
            layers: 2,
            dropout: 0.1,
            solver_tol: 1e-8,
            solver_max_iter: 50,
            passthrough: false,
            train: TrainConfig::default(),
        }
    }

    /// Defaults for planar-position tasks: alpha 1, normalized bound 0.05.
    pub fn planar(horizon: usize, action_dim: usize, selected: Vec<usize>) -> Self {
        Self {
            alpha: 1.0,
            bound: 0.05,
            ..Self::new(horizon, action_dim, selected)
        }
    }

    /// Shrinks the encoder for desk-scale experiments.
    pub fn with_compact_encoder(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self.feedforward_dim = embed_dim;
        self.heads = 2;
        self.layers = 1;
        self
    }

    pub fn selection(&self) -> Result<SelectionSpec> {
        SelectionSpec::new(self.action_dim, self.selected.clone())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            feedforward_dim: self.feedforward_dim,
            heads: self.heads,
            layers: self.layers,
            dropout: self.dropout,
            horizon: self.horizon,
            action_dim: self.action_dim,
        }
    }

    /// Constraint spec at the given per-step bound for actions with step
    /// duration `dt`.
    pub fn constraints(&self, bound: f64, dt: f64) -> Result<ConstraintSpec> {
        let dc = self.selected.len();
        let rate = bound / dt;
        let mut cons = ConstraintSpec::symmetric(rate, dc)?;
        if let Some(vb) = self.value_bound {
            cons = cons.with_value_bounds(vec![-vb; dc], vec![vb; dc])?;
        }
        Ok(cons)
    }

    fn full_dim(&self) -> usize {
        self.horizon * self.action_dim
    }
}

#[derive(Debug, Clone)]
enum Generator {
    Transformer(TransformerEncoder),
    MatrixLearning { param: usize },
    Static,
}

/// A configured layer plus its parameter store.
#[derive(Debug, Clone)]
pub struct DiffogModel {
    pub config: DiffogConfig,
    pub store: ParamStore,
    generator: Generator,
}

impl DiffogModel {
    pub fn init(config: DiffogConfig, seed: u64) -> Result<Self> {
        Self::init_with_head(config, seed, HeadInit::Zero)
    }

    pub fn init_with_head(config: DiffogConfig, seed: u64, head: HeadInit) -> Result<Self> {
        let mut store = ParamStore::new();
        let generator = match config.variant {
            VariantKind::Transformer => {
                let encoder =
                    TransformerEncoder::init(config.encoder_config(), &mut store, seed, head)?;
                Generator::Transformer(encoder)
            }
            VariantKind::MatrixLearning => {
                let n = config.full_dim();
                let param = store.add("factor", Matrix::zeros(n, n));
                Generator::MatrixLearning { param }
            }
            VariantKind::Static => Generator::Static,
        };
        Ok(Self {
            config,
            store,
            generator,
        })
    }

    /// Rebuilds the generator around a deserialized parameter store. Index
    /// layout is reproduced by re-running init with the same config.
    pub fn from_store(config: DiffogConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if model.store.len() != store.len() {
            return Err(Error::BadCheckpoint {
                reason: format!(
                    "expected {} parameters, found {}",
                    model.store.len(),
                    store.len()
                ),
            });
        }
        for idx in 0..store.len() {
            if model.store.name(idx) != store.name(idx)
                || model.store.value(idx).shape() != store.value(idx).shape()
            {
                return Err(Error::BadCheckpoint {
                    reason: format!("parameter {} mismatches the config", store.name(idx)),
                });
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn trainable(&self) -> bool {
        !matches!(self.generator, Generator::Static)
    }

    /// Cost matrix node for one normalized chunk. `dropout_rng` enables
    /// train-mode dropout in the transformer variant.
    fn cost_node(
        &self,
        tape: &mut Tape,
        chunk: &ActionChunk,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        match &self.generator {
            Generator::Transformer(encoder) => {
                let embedding = encoder.encode(tape, &self.store, chunk, dropout_rng)?;
                let nodes = spd::build_spd(tape, embedding, DEFAULT_EPSILON)?;
                Ok(nodes.cost)
            }
            Generator::MatrixLearning { param } => {
                let nodes =
                    spd::matrix_learning_spd(tape, &self.store, *param, DEFAULT_EPSILON)?;
                Ok(nodes.cost)
            }
            Generator::Static => Ok(tape.constant(Matrix::identity(self.config.full_dim()))),
        }
    }

    /// Evaluation-mode cost matrix for diagnostics (diagonality traces).
    pub fn cost_matrix(&self, chunk: &ActionChunk) -> Result<SpdCost> {
        let mut tape = Tape::new();
        match &self.generator {
            Generator::Static => Ok(spd::static_spd(self.config.full_dim())),
            Generator::Transformer(encoder) => {
                let embedding = encoder.encode(&mut tape, &self.store, chunk, None)?;
                let nodes = spd::build_spd(&mut tape, embedding, DEFAULT_EPSILON)?;
                Ok(SpdCost::from_nodes(&tape, nodes, DEFAULT_EPSILON))
            }
            Generator::MatrixLearning { param } => {
                let nodes =
                    spd::matrix_learning_spd(&mut tape, &self.store, *param, DEFAULT_EPSILON)?;
                Ok(SpdCost::from_nodes(&tape, nodes, DEFAULT_EPSILON))
            }
        }
    }

    /// Builds the refinement QP on the tape and solves it. Returns the full
    /// output chunk node (column) and the solver diagnostics. This is the
    /// training-path forward; `forward` wraps it for evaluation.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        chunk: &ActionChunk,
        cons: &ConstraintSpec,
        mode: AssembleMode,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, QpSolution)> {
        let sel = self.config.selection()?;
        let cost = self.cost_node(tape, chunk, dropout_rng)?;
        let selection = build_selection(&sel, chunk.horizon)?;
        let diff = build_difference(chunk.horizon, sel.selected_dim(), chunk.dt)?;

        if self.config.passthrough {
            // Reduced problem over the selected coordinates; frozen
            // coordinates contribute a cost-dependent linear term.
            let sel_node = tape.constant(selection.clone());
            let sel_t_node = tape.constant(selection.transpose());
            let projected = tape.matmul(sel_node, cost)?;
            let mut quad = tape.matmul(projected, sel_t_node)?;
            if self.config.alpha > 0.0 {
                let penalty = diff.transpose().matmul(&diff)?.scale(self.config.alpha);
                let penalty_node = tape.constant(penalty);
                quad = tape.add(quad, penalty_node)?;
            }
            let picked = selection.matvec(&chunk.values)?;
            let lifted = selection.matvec_t(&picked)?;
            let frozen: Vec<f64> = chunk
                .values
                .iter()
                .zip(&lifted)
                .map(|(a, l)| a - l)
                .collect();
            let frozen_node = tape.constant(Matrix::column(&frozen));
            let cross = tape.matmul(cost, frozen_node)?;
            let cross_sel = {
                let s_node = tape.constant(selection.clone());
                tape.matmul(s_node, cross)?
            };
            let neg_picked = tape.constant(Matrix::column(&picked).scale(-1.0));
            let lin = tape.add(cross_sel, neg_picked)?;

            let (ineq, rhs) = reduced_constraints(chunk.horizon, cons, mode, chunk.dt);
            let (solution_node, sol) = qp_solve_node(
                tape,
                quad,
                lin,
                ineq,
                rhs,
                self.config.solver_tol,
                self.config.solver_max_iter,
            )?;
            // Scatter the reduced solution over the frozen chunk.
            let lift = tape.constant(selection.transpose());
            let lifted_sol = tape.matmul(lift, solution_node)?;
            let base = tape.constant(Matrix::column(&frozen));
            let full = tape.add(lifted_sol, base)?;
            Ok((full, sol))
        } else {
            let diff_sel = diff.matmul(&selection)?;
            let mut quad = cost;
            if self.config.alpha > 0.0 {
                let penalty = diff_sel
                    .transpose()
                    .matmul(&diff_sel)?
                    .scale(self.config.alpha);
                let penalty_node = tape.constant(penalty);
                quad = tape.add(quad, penalty_node)?;
            }
            let lin = tape.constant(Matrix::column(&chunk.values).scale(-1.0));
            let (stack, rhs) = reduced_constraints(chunk.horizon, cons, mode, chunk.dt);
            let ineq = stack.matmul(&selection)?;
            qp_solve_node(
                tape,
                quad,
                lin,
                ineq,
                rhs,
                self.config.solver_tol,
                self.config.solver_max_iter,
            )
        }
    }

    /// Evaluation-mode forward pass on a normalized chunk. Passing the
    /// previously executed action (selected dims, normalized) switches to
    /// inference assembly with the linking rows; `bound_override` swaps the
    /// per-step bound, which is how schedules reach the layer.
    pub fn forward(
        &self,
        chunk: &ActionChunk,
        prev: Option<&[f64]>,
        bound_override: Option<f64>,
    ) -> Result<ActionChunk> {
        let bound = bound_override.unwrap_or(self.config.bound);
        let mut cons = self.config.constraints(bound, chunk.dt)?;
        let mode = match prev {
            Some(p) => {
                cons = cons.with_prev_action(p.to_vec());
                AssembleMode::Inference
            }
            None => AssembleMode::Train,
        };
        let mut tape = Tape::new();
        let (out, _) = self.forward_on_tape(&mut tape, chunk, &cons, mode, None)?;
        chunk.with_values(tape.value(out).data().to_vec())
    }
}

/// Constraint stack over the stacked selected trajectory (difference rows,
/// linking rows, value rows) shared by both assembly paths.
fn reduced_constraints(
    horizon: usize,
    cons: &ConstraintSpec,
    mode: AssembleMode,
    dt: f64,
) -> (Matrix, Vec<f64>) {
    let dc = cons.selected_dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let width = horizon * dc;
    let scaled_max: Vec<f64> = cons.rate_max.iter().map(|d| d * dt).collect();
    let scaled_min: Vec<f64> = cons.rate_min.iter().map(|d| d * dt).collect();

    for step in 0..horizon - 1 {
        for j in 0..dc {
            let mut row = vec![0.0; width];
            row[step * dc + j] = -1.0;
            row[(step + 1) * dc + j] = 1.0;
            rows.push(row);
            rhs.push(scaled_max[j]);
        }
    }
    for step in 0..horizon - 1 {
        for j in 0..dc {
            let mut row = vec![0.0; width];
            row[step * dc + j] = 1.0;
            row[(step + 1) * dc + j] = -1.0;
            rows.push(row);
            rhs.push(-scaled_min[j]);
        }
    }
    if mode == AssembleMode::Inference {
        let prev = cons.prev_action.as_ref().expect("validated upstream");
        for j in 0..dc {
            let mut row = vec![0.0; width];
            row[j] = 1.0;
            rows.push(row);
            rhs.push(prev[j] + scaled_max[j]);
        }
        for j in 0..dc {
            let mut row = vec![0.0; width];
            row[j] = -1.0;
            rows.push(row);
            rhs.push(-(prev[j] + scaled_min[j]));
        }
    }
    if let (Some(vmin), Some(vmax)) = (&cons.value_min, &cons.value_max) {
        for step in 0..horizon {
            for j in 0..dc {
                let mut row = vec![0.0; width];
                row[step * dc + j] = 1.0;
                rows.push(row);
                rhs.push(vmax[j]);
            }
        }
        for step in 0..horizon {
            for j in 0..dc {
                let mut row = vec![0.0; width];
                row[step * dc + j] = -1.0;
                rows.push(row);
                rhs.push(-vmin[j]);
            }
        }
    }
    let mat = Matrix::from_rows(&rows).expect("uniform rows");
    (mat, rhs)
}

struct QpSolveOp {
    ineq: Matrix,
    bound: Vec<f64>,
    solution: QpSolution,
}

impl crate::tensor::CustomOp for QpSolveOp {
    fn name(&self) -> &'static str {
        "qp_solve"
    }

    fn backward(&self, adjoint: &Matrix, inputs: &[&Matrix]) -> Result<Vec<Matrix>> {
        let quad = inputs[0];
        let lin: Vec<f64> = inputs[1].data().to_vec();
        let inst = QpInstance::new(quad.clone(), lin, self.ineq.clone(), self.bound.clone())?;
        let back = qp_backward(&inst, &self.solution, adjoint.data())?;
        Ok(vec![back.grad_quad, Matrix::column(&back.grad_lin)])
    }
}

/// Solves the QP defined by tape nodes `quad` (n x n) and `lin` (n x 1) plus
/// fixed constraint data, recording a node whose backward rule is the
/// linearized-KKT adjoint solve.
pub fn qp_solve_node(
    tape: &mut Tape,
    quad: NodeId,
    lin: NodeId,
    ineq: Matrix,
    bound: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(NodeId, QpSolution)> {
    let inst = QpInstance::new(
        tape.value(quad).clone(),
        tape.value(lin).data().to_vec(),
        ineq.clone(),
        bound.clone(),
    )?;
    let solution = solve_qp(&inst, tol, max_iter)?;
    let value = Matrix::column(&solution.primal);
    let op = QpSolveOp {
        ineq,
        bound,
        solution: solution.clone(),
    };
    let node = tape.custom(&[quad, lin], Box::new(op), value);
    Ok((node, solution))
}

/// Squared distance between one output and its target.
pub fn sample_loss(output: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(output.len(), target.len());
    output
        .iter()
        .zip(target)
        .map(|(y, a)| (y - a) * (y - a))
        .sum()
}

/// Mean squared-distance loss over a batch.
pub fn loss(outputs: &[ActionChunk], targets: &[ActionChunk]) -> f64 {
    debug_assert_eq!(outputs.len(), targets.len());
    if outputs.is_empty() {
        return 0.0;
    }
    let total: f64 = outputs
        .iter()
        .zip(targets)
        .map(|(y, a)| sample_loss(&y.values, &a.values))
        .sum();
    total / outputs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean fraction of active constraints across the batch.
    pub constraint_activity: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    /// True when the loss went non-finite; the model keeps the last finite
    /// parameters.
    pub diverged: bool,
}

/// One (input, target) pair per batch slot, both normalized.
type BatchSampler<'a> = dyn Fn(usize, usize, &mut ChaCha8Rng) -> (ActionChunk, ActionChunk) + 'a;

fn train_loop(model: &mut DiffogModel, sampler: &BatchSampler) -> Result<TrainOutcome> {
    if !model.trainable() {
        return Err(Error::NotTrainable);
    }
    let train_cfg = model.config.train.clone();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: train_cfg.learning_rate,
            grad_clip: Some(train_cfg.grad_clip),
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut sample_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let started = Instant::now();
    let mut records = Vec::with_capacity(train_cfg.steps);
    let mut last_finite = model.store.clone();

    for step in 0..train_cfg.steps {
        model.store.zero_grad();
        let mut batch_loss = 0.0;
        let mut activity = 0.0;
        let scale = 1.0 / train_cfg.batch_size as f64;
        for slot in 0..train_cfg.batch_size {
            let (input, target) = sampler(step, slot, &mut sample_rng);
            let cons = model.config.constraints(model.config.bound, input.dt)?;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(
                train_cfg
                    .seed
                    .wrapping_mul(0x5851_F42D_4C95_7F2D)
                    .wrapping_add((step * train_cfg.batch_size + slot) as u64),
            );
            let mut tape = Tape::new();
            let (output, sol) = model.forward_on_tape(
                &mut tape,
                &input,
                &cons,
                AssembleMode::Train,
                Some(&mut dropout_rng),
            )?;
            let neg_target = tape.constant(Matrix::column(&target.values).scale(-1.0));
            let diff = tape.add(output, neg_target)?;
            let loss_node = tape.sum_squares(diff)?;
            batch_loss += tape.value(loss_node).get(0, 0) * scale;
            activity += sol.active_fraction(ACTIVITY_TOL) * scale;
            let grads = tape.backward(loss_node)?;
            model.store.accumulate(&grads, scale);
        }
        if !batch_loss.is_finite() || !model.store.grads_all_finite() {
            model.store = last_finite;
            return Ok(TrainOutcome {
                records,
                diverged: true,
            });
        }
        last_finite = model.store.clone();
        adam.step(&mut model.store);
        records.push(TrainRecord {
            step,
            loss: batch_loss,
            constraint_activity: activity,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        records,
        diverged: false,
    })
}

/// Supervised training directly on demonstration chunks: the input is the
/// target.
pub fn train_dataset(model: &mut DiffogModel, dataset: &DemoDataset) -> Result<TrainOutcome> {
    let horizon = model.config.horizon;
    let windows = dataset.windows(horizon);
    debug_assert!(!windows.is_empty(), "dataset shorter than the horizon");
    let sampler = move |_step: usize, _slot: usize, rng: &mut ChaCha8Rng| {
        let (episode, start) = windows[rng.gen_range(0..windows.len())];
        let chunk = dataset.normalized_chunk(episode, start, horizon);
        (chunk.clone(), chunk)
    };
    train_loop(model, &sampler)
}

/// Refinement training: inputs come from a frozen base policy, targets from
/// the demonstrations. Gradients reach only the layer's parameters.
pub fn train_refine(
    model: &mut DiffogModel,
    policy: &BasePolicyStub,
    dataset: &DemoDataset,
) -> Result<TrainOutcome> {
    let horizon = model.config.horizon;
    let windows = dataset.windows(horizon);
    debug_assert!(!windows.is_empty(), "dataset shorter than the horizon");
    let sampler = move |_step: usize, _slot: usize, rng: &mut ChaCha8Rng| {
        let (episode, start) = windows[rng.gen_range(0..windows.len())];
        let target = dataset.normalized_chunk(episode, start, horizon);
        let raw = policy.chunk(
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
        let input = ActionChunk::new(horizon, dataset.meta.action_dim, values, 1.0)
            .expect("normalized policy chunk");
        (input, target)
    };
    train_loop(model, &sampler)
}

/// Phased per-step bound schedule applied at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    /// Number of executed steps this phase covers; `None` means until the
    /// end of the rollout (only valid for the last phase).
    pub steps: Option<usize>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSchedule {
    pub phases: Vec<SchedulePhase>,
}

impl BoundSchedule {
    pub fn new(phases: Vec<SchedulePhase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::BadSchedule {
                reason: "no phases".into(),
            });
        }
        for (i, phase) in phases.iter().enumerate() {
            if !(phase.bound > 0.0) {
                return Err(Error::BadSchedule {
                    reason: format!("phase {i} bound must be positive"),
                });
            }
            if phase.steps.is_none() && i != phases.len() - 1 {
                return Err(Error::BadSchedule {
                    reason: format!("open-ended phase {i} before the last"),
                });
            }
            if let Some(0) = phase.steps {
                return Err(Error::BadSchedule {
                    reason: format!("phase {i} covers zero steps"),
                });
            }
        }
        Ok(Self { phases })
    }

    /// Parses `"0.05:40,0.1:40,0.2:40,0.3:rest"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut phases = Vec::new();
        for part in text.split(',') {
            let (bound_s, steps_s) = part.split_once(':').ok_or_else(|| Error::BadSchedule {
                reason: format!("phase `{part}` is not bound:steps"),
            })?;
            let bound: f64 = bound_s.trim().parse().map_err(|_| Error::BadSchedule {
                reason: format!("bad bound `{bound_s}`"),
            })?;
            let steps = match steps_s.trim() {
                "rest" => None,
                s => Some(s.parse::<usize>().map_err(|_| Error::BadSchedule {
                    reason: format!("bad step count `{s}`"),
                })?),
            };
            phases.push(SchedulePhase { steps, bound });
        }
        Self::new(phases)
    }

    /// True when the phases cover `horizon` executed steps.
    pub fn covers(&self, horizon: usize) -> bool {
        let mut covered = 0usize;
        for phase in &self.phases {
            match phase.steps {
                Some(s) => covered += s,
                None => return true,
            }
        }
        covered >= horizon
    }

    pub fn bound_at(&self, step: usize) -> f64 {
        let mut at = 0usize;
        for phase in &self.phases {
            match phase.steps {
                Some(s) if step >= at + s => at += s,
                _ => return phase.bound,
            }
        }
        self.phases.last().expect("validated non-empty").bound
    }

    pub fn phase_at(&self, step: usize) -> usize {
        let mut at = 0usize;
        for (i, phase) in self.phases.iter().enumerate() {
            match phase.steps {
                Some(s) if step >= at + s => at += s,
                _ => return i,
            }
        }
        self.phases.len() - 1
    }

    /// Tightest bound over a window of executed steps. Chunks spanning a
    /// phase boundary are planned at the tighter bound so every executed
    /// step respects its phase.
    pub fn min_bound_in(&self, start: usize, len: usize) -> f64 {
        (start..start + len.max(1))
            .map(|s| self.bound_at(s))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Rollout processor wrapping a model: normalizes incoming chunks, applies
/// the layer with the linking constraint and the schedule's bound, and
/// denormalizes the result.
pub struct DiffogProcessor<'a> {
    model: &'a DiffogModel,
    stats: &'a NormStats,
    schedule: Option<&'a BoundSchedule>,
}

impl<'a> DiffogProcessor<'a> {
    pub fn new(
        model: &'a DiffogModel,
        stats: &'a NormStats,
        schedule: Option<&'a BoundSchedule>,
    ) -> Self {
        Self {
            model,
            stats,
            schedule,
        }
    }
}

impl ChunkProcessor for DiffogProcessor<'_> {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        prev_selected: Option<&[f64]>,
        exec_step: usize,
    ) -> Result<ActionChunk> {
        let mut values = Vec::with_capacity(chunk.values.len());
        for k in 0..chunk.horizon {
            values.extend(self.stats.normalize(chunk.step(k)));
        }
        // Normalized chunks run in step units: per-step deltas are what the
        // bound constrains.
        let normalized = ActionChunk::new(chunk.horizon, chunk.action_dim, values, 1.0)?;
        let prev_norm: Option<Vec<f64>> = prev_selected.map(|prev| {
            self.model
                .config
                .selected
                .iter()
                .zip(prev)
                .map(|(&dim, &raw)| {
                    let full_min = self.stats.min[dim];
                    let scale = self.stats.delta_scale(dim);
                    if scale == 0.0 {
                        0.0
                    } else {
                        (raw - full_min) * scale - 1.0
                    }
                })
                .collect()
        });
        let bound = self
            .schedule
            .map(|s| s.min_bound_in(exec_step, self.model.config.exec_horizon));
        let out = self
            .model
            .forward(&normalized, prev_norm.as_deref(), bound)?;
        let mut raw = Vec::with_capacity(out.values.len());
        for k in 0..out.horizon {
            raw.extend(self.stats.denormalize(out.step(k)));
        }
        chunk.with_values(raw)
    }
}

/// Receding-horizon rollout with the layer applied on top of the base
/// policy; `schedule` switches the per-step bound over execution phases.
pub fn rollout_infer(
    model: &DiffogModel,
    stats: &NormStats,
    spec: &SynthTaskSpec,
    init_seed: u64,
    policy: &BasePolicyStub,
    dataset: Option<&DemoDataset>,
    schedule: Option<&BoundSchedule>,
) -> Result<RolloutResult> {
    if let Some(s) = schedule {
        if !s.covers(spec.horizon) {
            return Err(Error::BadSchedule {
                reason: format!("phases do not cover the {}-step horizon", spec.horizon),
            });
        }
    }
    let mut processor = DiffogProcessor::new(model, stats, schedule);
    rollout(
        spec,
        init_seed,
        policy,
        dataset,
        &mut processor,
        model.config.horizon,
        model.config.exec_horizon,
    )
}

/// Smoothness of a model output on a fixed evaluation chunk; used by the
/// adjustability trend checks.
pub fn output_smoothness(model: &DiffogModel, chunk: &ActionChunk) -> Result<f64> {
    let out = model.forward(chunk, None, None)?;
    let sel = model.config.selection()?;
    smoothness_cost(&out.values, &sel, chunk.dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(variant: VariantKind) -> DiffogConfig {
        let mut cfg = DiffogConfig::new(4, 2, vec![0, 1]).with_compact_encoder(8);
        cfg.variant = variant;
        cfg.dropout = 0.0;
        cfg
    }

    fn feasible_chunk() -> ActionChunk {
        ActionChunk::new(
            4,
            2,
            vec![0.00, 0.10, 0.05, 0.12, 0.09, 0.15, 0.13, 0.18],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn static_alpha_zero_is_identity_on_feasible_input() {
        let mut cfg = small_config(VariantKind::Static);
        cfg.alpha = 0.0;
        let model = DiffogModel::init(cfg, 0).unwrap();
        let chunk = feasible_chunk();
        let out = model.forward(&chunk, None, None).unwrap();
        for (y, a) in out.values.iter().zip(&chunk.values) {
            assert!((y - a).abs() <= 1e-8);
        }
    }

    #[test]
    fn infeasible_input_is_projected_to_bounds() {
        let mut cfg = small_config(VariantKind::Static);
        cfg.alpha = 0.0;
        let model = DiffogModel::init(cfg, 0).unwrap();
        let chunk = ActionChunk::new(
            4,
            2,
            vec![0.0, 0.0, 0.3, 0.0, 0.3, 0.05, 0.6, 0.05],
            1.0,
        )
        .unwrap();
        let out = model.forward(&chunk, None, None).unwrap();
        for step in 0..3 {
            for dim in 0..2 {
                let d = out.values[(step + 1) * 2 + dim] - out.values[step * 2 + dim];
                assert!(d.abs() <= 0.1 + 1e-6, "difference {d}");
            }
        }
    }

    #[test]
    fn untrained_transformer_tracks_static_variant() {
        // Zero-initialized head gives a near-identity cost; outputs agree
        // with the static variant up to the epsilon jitter scale.
        let transformer = DiffogModel::init(small_config(VariantKind::Transformer), 7).unwrap();
        let stat = DiffogModel::init(small_config(VariantKind::Static), 7).unwrap();
        let chunk = feasible_chunk();
        let a = transformer.forward(&chunk, None, None).unwrap();
        let b = stat.forward(&chunk, None, None).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn linking_constraint_binds_first_step() {
        let mut cfg = small_config(VariantKind::Static);
        cfg.alpha = 0.0;
        let model = DiffogModel::init(cfg, 0).unwrap();
        let chunk = ActionChunk::new(4, 2, vec![0.5; 8], 1.0).unwrap();
        let prev = vec![0.0, 0.0];
        let out = model.forward(&chunk, Some(&prev), None).unwrap();
        for dim in 0..2 {
            assert!((out.values[dim] - prev[dim]).abs() <= 0.1 + 1e-6);
        }
    }

    #[test]
    fn passthrough_matches_full_space_for_identity_cost() {
        // With an identity cost both formulations agree on the selected
        // dimensions, and passthrough returns excluded ones untouched.
        let mut full_cfg = small_config(VariantKind::Static);
        full_cfg.selected = vec![0];
        let mut pass_cfg = full_cfg.clone();
        pass_cfg.passthrough = true;
        let full = DiffogModel::init(full_cfg, 0).unwrap();
        let pass = DiffogModel::init(pass_cfg, 0).unwrap();
        let chunk = ActionChunk::new(
            4,
            2,
            vec![0.0, 0.9, 0.35, -0.7, 0.6, 0.5, 0.95, 0.1],
            1.0,
        )
        .unwrap();
        let a = full.forward(&chunk, None, None).unwrap();
        let b = pass.forward(&chunk, None, None).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
        }
        // Excluded dimension comes back bit-identical under passthrough.
        for step in 0..4 {
            assert_eq!(b.values[step * 2 + 1], chunk.values[step * 2 + 1]);
        }
    }

    #[test]
    fn simultaneous_value_and_rate_bounds() {
        let mut cfg = small_config(VariantKind::Static);
        cfg.alpha = 0.0;
        cfg.bound = 0.2;
        cfg.value_bound = Some(0.5);
        let model = DiffogModel::init(cfg, 0).unwrap();
        let chunk = ActionChunk::new(4, 2, vec![0.0, 0.0, 0.4, 0.3, 0.8, 0.6, 1.2, 0.9], 1.0)
            .unwrap();
        let out = model.forward(&chunk, None, None).unwrap();
        for step in 0..4 {
            for dim in 0..2 {
                assert!(out.values[step * 2 + dim].abs() <= 0.5 + 1e-6);
            }
        }
        for step in 0..3 {
            for dim in 0..2 {
                let d = out.values[(step + 1) * 2 + dim] - out.values[step * 2 + dim];
                assert!(d.abs() <= 0.2 + 1e-6);
            }
        }
    }

    #[test]
    fn schedule_parse_and_lookup() {
        let s = BoundSchedule::parse("0.05:40,0.1:40,0.2:40,0.3:rest").unwrap();
        assert_eq!(s.phases.len(), 4);
        assert_eq!(s.bound_at(0), 0.05);
        assert_eq!(s.bound_at(39), 0.05);
        assert_eq!(s.bound_at(40), 0.1);
        assert_eq!(s.bound_at(119), 0.2);
        assert_eq!(s.bound_at(120), 0.3);
        assert_eq!(s.bound_at(10_000), 0.3);
        assert_eq!(s.phase_at(80), 2);
        assert!(s.covers(1000));
        // A chunk straddling the 40-step boundary plans at the tighter bound.
        assert_eq!(s.min_bound_in(36, 8), 0.05);
    }

    #[test]
    fn schedule_rejects_open_middle_phase() {
        assert!(BoundSchedule::parse("0.05:rest,0.1:40").is_err());
        assert!(BoundSchedule::parse("0.05:0,0.1:rest").is_err());
        assert!(BoundSchedule::parse("nonsense").is_err());
    }

    #[test]
    fn static_variant_rejects_training() {
        let mut model = DiffogModel::init(small_config(VariantKind::Static), 0).unwrap();
        let data = crate::synth::gen_demos(
            &crate::synth::SynthTaskSpec::new(crate::synth::TaskKind::Reach2d, 0),
            1,
            0,
        )
        .unwrap();
        assert!(matches!(
            train_dataset(&mut model, &data),
            Err(Error::NotTrainable)
        ));
    }

    #[test]
    fn loss_reference_values() {
        let a = ActionChunk::new(2, 1, vec![0.1, 0.2], 1.0).unwrap();
        let mut b = a.clone();
        assert_eq!(loss(&[a.clone()], &[a.clone()]), 0.0);
        b.values[0] += 0.1;
        assert!((loss(&[b.clone()], &[a.clone()]) - 0.01).abs() < 1e-15);
        // Batch mean equals the average of per-sample losses.
        let batch = loss(&[a.clone(), b.clone()], &[a.clone(), a.clone()]);
        assert!((batch - 0.005).abs() < 1e-15);
    }
}
