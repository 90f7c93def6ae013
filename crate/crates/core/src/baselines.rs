//! Post-hoc trajectory processors compared against the learned layer:
//! greedy constraint clipping, penalty-based descent on constraint
//! violations, and a residual correction network trained with a smoothness
//! penalty but no hard constraint.
//!
//! Clipping and penalty descent operate on raw (unnormalized) actions; the
//! rollout adapters convert the layer's normalized bounds to raw units so
//! all processors enforce exactly the same constraint.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffog::{TrainConfig, TrainRecord};
use crate::error::{Error, Result};
use crate::synth::{ChunkProcessor, DemoDataset, NormStats};
use crate::tensor::{euclidean_norm, Adam, AdamConfig, Matrix, NodeId, ParamStore, Tape};
use crate::trajectory::{build_difference, build_selection, ActionChunk, SelectionSpec};

/// Cumulative elementwise clipping: each step moves from the previously
/// clipped step by at most the per-step bounds. Outputs satisfy the bounds
/// exactly, not just within tolerance.
///
/// `seq` is a flattened chunk of `D_c`-dimensional steps; `lo`/`hi` are the
/// per-step delta bounds (`d_min dt`, `d_max dt`).
pub fn clip_greedy(prev: &[f64], seq: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let dim = prev.len();
    debug_assert_eq!(seq.len() % dim, 0);
    let mut out = Vec::with_capacity(seq.len());
    let mut anchor = prev.to_vec();
    for step in seq.chunks(dim) {
        for j in 0..dim {
            let delta = step[j] - anchor[j];
            // In-bounds values pass through bit-identical, which makes the
            // operation exactly idempotent.
            anchor[j] = if delta > hi[j] {
                anchor[j] + hi[j]
            } else if delta < lo[j] {
                anchor[j] + lo[j]
            } else {
                step[j]
            };
            out.push(anchor[j]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    /// Step size eta.
    pub eta: f64,
    /// Violation tolerance: stop once |v_max| + |v_min| drops below it.
    pub tol: f64,
    pub max_iter: usize,
}

impl PenaltyParams {
    pub fn new(eta: f64, tol: f64, max_iter: usize) -> Self {
        debug_assert!(eta > 0.0 && tol > 0.0 && max_iter >= 1);
        Self { eta, tol, max_iter }
    }

    /// Parameter set for bounds quoted on normalized actions.
    pub fn normalized_actions() -> Self {
        Self::new(0.03, 0.004, 10_000)
    }

    /// Parameter set for pixel-scale planar positions.
    pub fn pixel_positions() -> Self {
        Self::new(0.1, 0.1, 1_000)
    }

    /// Parameter set for millimeter-scale positions.
    pub fn metric_positions() -> Self {
        Self::new(0.1, 0.05, 1_000)
    }

    /// Parameter set for joint-angle actions.
    pub fn joint_angles() -> Self {
        Self::new(0.05, 0.01, 1_000)
    }

    pub fn presets() -> [Self; 4] {
        [
            Self::normalized_actions(),
            Self::pixel_positions(),
            Self::metric_positions(),
            Self::joint_angles(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyResult {
    pub values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Total violation |v_max| + |v_min| per iteration, including the final
    /// value.
    pub violation_trace: Vec<f64>,
}

/// Iterative violation descent over the whole chunk. Each iteration forms
/// the difference sequence against the shifted iterate (with `prev` in
/// front), measures elementwise bound violations, and steps the chunk
/// against them. Rows are treated independently; there is no chain rule
/// through the cumulative coupling. Non-convergence is a flagged result.
pub fn penalty_optimize(
    prev: &[f64],
    seq: &[f64],
    lo: &[f64],
    hi: &[f64],
    params: &PenaltyParams,
) -> PenaltyResult {
    let dim = prev.len();
    debug_assert_eq!(seq.len() % dim, 0);
    let steps = seq.len() / dim;
    // Warm start from the input sequence.
    let mut values = seq.to_vec();
    let mut violation_trace = Vec::new();

    for iter in 0..params.max_iter {
        let mut v_max = vec![0.0; values.len()];
        let mut v_min = vec![0.0; values.len()];
        for k in 0..steps {
            for j in 0..dim {
                let idx = k * dim + j;
                let prev_val = if k == 0 { prev[j] } else { values[idx - dim] };
                let delta = values[idx] - prev_val;
                v_max[idx] = (delta - hi[j]).max(0.0);
                v_min[idx] = (lo[j] - delta).max(0.0);
            }
        }
        let total = euclidean_norm(&v_max) + euclidean_norm(&v_min);
        violation_trace.push(total);
        if total < params.tol {
            return PenaltyResult {
                values,
                converged: true,
                iterations: iter,
                violation_trace,
            };
        }
        for idx in 0..values.len() {
            values[idx] -= params.eta * (v_max[idx] - v_min[idx]);
        }
    }

    PenaltyResult {
        values,
        converged: false,
        iterations: params.max_iter,
        violation_trace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualConfig {
    /// Hidden layer widths of the correction network.
    pub hidden: Vec<usize>,
    /// Smoothness penalty weight.
    pub alpha: f64,
    pub train: TrainConfig,
}

impl ResidualConfig {
    pub fn new(alpha: f64) -> Self {
        debug_assert!(alpha >= 0.0);
        Self {
            hidden: vec![256, 256],
            alpha,
            train: TrainConfig::default(),
        }
    }

    pub fn compact(alpha: f64, width: usize) -> Self {
        Self {
            hidden: vec![width, width],
            ..Self::new(alpha)
        }
    }
}

/// Residual correction policy: `y = a + MLP(a)` on normalized chunks, tanh
/// hidden layers, zero-initialized output layer. No constraint guarantee on
/// outputs.
#[derive(Debug, Clone)]
pub struct ResidualPolicy {
    pub config: ResidualConfig,
    pub store: ParamStore,
    pub horizon: usize,
    pub action_dim: usize,
    layer_params: Vec<(usize, usize)>,
}

impl ResidualPolicy {
    pub fn init(
        config: ResidualConfig,
        horizon: usize,
        action_dim: usize,
        seed: u64,
    ) -> ResidualPolicy {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = horizon * action_dim;
        let mut dims = vec![input];
        dims.extend(&config.hidden);
        dims.push(input);
        let mut layer_params = Vec::new();
        for l in 0..dims.len() - 1 {
            let (rows, cols) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let w = if last {
                store.add(format!("mlp{l}.w"), Matrix::zeros(rows, cols))
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                store.add(
                    format!("mlp{l}.w"),
                    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit)),
                )
            };
            let b = store.add(format!("mlp{l}.b"), Matrix::zeros(1, cols));
            layer_params.push((w, b));
        }
        ResidualPolicy {
            config,
            store,
            horizon,
            action_dim,
            layer_params,
        }
    }

    fn correction_node(&self, tape: &mut Tape, input_row: NodeId) -> Result<NodeId> {
        let mut x = input_row;
        let last = self.layer_params.len() - 1;
        for (l, (w, b)) in self.layer_params.iter().enumerate() {
            let w_node = tape.param(&self.store, *w);
            let b_node = tape.param(&self.store, *b);
            let lin = tape.matmul(x, w_node)?;
            let biased = tape.add(lin, b_node)?;
            x = if l == last { biased } else { tape.tanh(biased) };
        }
        Ok(x)
    }

    /// Corrected normalized chunk.
    pub fn apply(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        let mut tape = Tape::new();
        let input = tape.constant(Matrix::row(&chunk.values));
        let correction = self.correction_node(&mut tape, input)?;
        let out = tape.add(input, correction)?;
        chunk.with_values(tape.value(out).data().to_vec())
    }
}

/// Trains the residual network on normalized demonstration chunks with
/// `|y - a|^2 + alpha/2 * |A_diff S y|^2`.
pub fn residual_train(
    dataset: &DemoDataset,
    sel: &SelectionSpec,
    horizon: usize,
    config: ResidualConfig,
    seed: u64,
) -> Result<(ResidualPolicy, Vec<TrainRecord>)> {
    let mut policy = ResidualPolicy::init(config, horizon, dataset.meta.action_dim, seed);
    let train_cfg = policy.config.train.clone();
    let windows = dataset.windows(horizon);
    debug_assert!(!windows.is_empty());

    let selection = build_selection(sel, horizon)?;
    let diff = build_difference(horizon, sel.selected_dim(), dataset.meta.dt)?;
    let diff_sel = diff.matmul(&selection)?;

    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: train_cfg.learning_rate,
            grad_clip: Some(train_cfg.grad_clip),
            ..AdamConfig::default()
        },
        &policy.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let started = std::time::Instant::now();
    let mut records = Vec::with_capacity(train_cfg.steps);

    for step in 0..train_cfg.steps {
        policy.store.zero_grad();
        let mut batch_loss = 0.0;
        let scale = 1.0 / train_cfg.batch_size as f64;
        for _ in 0..train_cfg.batch_size {
            let (episode, start) = windows[rng.gen_range(0..windows.len())];
            let target = dataset.normalized_chunk(episode, start, horizon);
            let mut tape = Tape::new();
            let input = tape.constant(Matrix::row(&target.values));
            let correction = policy.correction_node(&mut tape, input)?;
            let output = tape.add(input, correction)?;
            // |y - a|^2 reduces to the squared correction.
            let fidelity = tape.sum_squares(correction)?;
            let out_col = tape.transpose(output);
            let diff_node = tape.constant(diff_sel.clone());
            let derivative = tape.matmul(diff_node, out_col)?;
            let smooth = tape.sum_squares(derivative)?;
            let smooth_scaled = tape.scale(smooth, policy.config.alpha / 2.0);
            let loss_node = tape.add(fidelity, smooth_scaled)?;
            batch_loss += tape.value(loss_node).get(0, 0) * scale;
            let grads = tape.backward(loss_node)?;
            policy.store.accumulate(&grads, scale);
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        adam.step(&mut policy.store);
        records.push(TrainRecord {
            step,
            loss: batch_loss,
            constraint_activity: 0.0,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((policy, records))
}

/// Rollout adapter for greedy clipping on raw actions.
pub struct ClipProcessor<'a> {
    stats: &'a NormStats,
    selected: Vec<usize>,
    /// Normalized symmetric per-step bound, converted to raw units per dim.
    raw_bounds: Vec<f64>,
}

impl<'a> ClipProcessor<'a> {
    pub fn new(stats: &'a NormStats, selected: Vec<usize>, normalized_bound: f64) -> Self {
        let raw_bounds = stats.raw_bounds(normalized_bound, &selected);
        Self {
            stats,
            selected,
            raw_bounds,
        }
    }
}

impl ChunkProcessor for ClipProcessor<'_> {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        prev_selected: Option<&[f64]>,
        _exec_step: usize,
    ) -> Result<ActionChunk> {
        let dc = self.selected.len();
        let mut seq = Vec::with_capacity(chunk.horizon * dc);
        for k in 0..chunk.horizon {
            let step = chunk.step(k);
            seq.extend(self.selected.iter().map(|&d| step[d]));
        }
        let prev: Vec<f64> = match prev_selected {
            Some(p) => p.to_vec(),
            // First chunk: anchor on its own first step so it is untouched.
            None => seq[..dc].to_vec(),
        };
        let lo: Vec<f64> = self.raw_bounds.iter().map(|b| -b).collect();
        let clipped = clip_greedy(&prev, &seq, &lo, &self.raw_bounds);
        let mut values = chunk.values.clone();
        for k in 0..chunk.horizon {
            for (j, &dim) in self.selected.iter().enumerate() {
                values[k * chunk.action_dim + dim] = clipped[k * dc + j];
            }
        }
        let _ = self.stats;
        chunk.with_values(values)
    }
}

/// Rollout adapter for penalty descent on raw actions.
pub struct PenaltyProcessor<'a> {
    stats: &'a NormStats,
    selected: Vec<usize>,
    raw_bounds: Vec<f64>,
    params: PenaltyParams,
    /// True if any chunk failed to reach the tolerance.
    pub any_nonconverged: bool,
}

impl<'a> PenaltyProcessor<'a> {
    pub fn new(
        stats: &'a NormStats,
        selected: Vec<usize>,
        normalized_bound: f64,
        params: PenaltyParams,
    ) -> Self {
        let raw_bounds = stats.raw_bounds(normalized_bound, &selected);
        Self {
            stats,
            selected,
            raw_bounds,
            params,
            any_nonconverged: false,
        }
    }
}

impl ChunkProcessor for PenaltyProcessor<'_> {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        prev_selected: Option<&[f64]>,
        _exec_step: usize,
    ) -> Result<ActionChunk> {
        let dc = self.selected.len();
        let mut seq = Vec::with_capacity(chunk.horizon * dc);
        for k in 0..chunk.horizon {
            let step = chunk.step(k);
            seq.extend(self.selected.iter().map(|&d| step[d]));
        }
        let prev: Vec<f64> = match prev_selected {
            Some(p) => p.to_vec(),
            None => seq[..dc].to_vec(),
        };
        let lo: Vec<f64> = self.raw_bounds.iter().map(|b| -b).collect();
        let result = penalty_optimize(&prev, &seq, &lo, &self.raw_bounds, &self.params);
        if !result.converged {
            self.any_nonconverged = true;
        }
        let mut values = chunk.values.clone();
        for k in 0..chunk.horizon {
            for (j, &dim) in self.selected.iter().enumerate() {
                values[k * chunk.action_dim + dim] = result.values[k * dc + j];
            }
        }
        let _ = self.stats;
        chunk.with_values(values)
    }
}

/// Rollout adapter for the residual policy on normalized actions.
pub struct ResidualProcessor<'a> {
    policy: &'a ResidualPolicy,
    stats: &'a NormStats,
}

impl<'a> ResidualProcessor<'a> {
    pub fn new(policy: &'a ResidualPolicy, stats: &'a NormStats) -> Self {
        Self { policy, stats }
    }
}

impl ChunkProcessor for ResidualProcessor<'_> {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        _prev_selected: Option<&[f64]>,
        _exec_step: usize,
    ) -> Result<ActionChunk> {
        let mut values = Vec::with_capacity(chunk.values.len());
        for k in 0..chunk.horizon {
            values.extend(self.stats.normalize(chunk.step(k)));
        }
        let normalized = ActionChunk::new(chunk.horizon, chunk.action_dim, values, chunk.dt)?;
        let corrected = self.policy.apply(&normalized)?;
        let mut raw = Vec::with_capacity(corrected.values.len());
        for k in 0..corrected.horizon {
            raw.extend(self.stats.denormalize(corrected.step(k)));
        }
        chunk.with_values(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_single_step() {
        let out = clip_greedy(&[0.0], &[0.3], &[-0.1], &[0.1]);
        assert_eq!(out, vec![0.1]);
    }

    #[test]
    fn clip_accumulates_greedily() {
        let out = clip_greedy(&[0.0], &[0.3, 0.35], &[-0.1], &[0.1]);
        assert_eq!(out, vec![0.1, 0.2]);
    }

    #[test]
    fn clip_is_identity_on_feasible_input() {
        let seq = vec![0.05, 0.1, 0.12];
        let out = clip_greedy(&[0.0], &seq, &[-0.1], &[0.1]);
        assert_eq!(out, seq);
    }

    #[test]
    fn clip_is_idempotent() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prev = vec![0.0, 0.0];
        let lo = vec![-0.07, -0.05];
        let hi = vec![0.07, 0.05];
        let once = clip_greedy(&prev, &seq, &lo, &hi);
        let twice = clip_greedy(&prev, &once, &lo, &hi);
        assert_eq!(once, twice);
        // Bounds hold to machine precision on recomputed differences.
        let mut anchor = prev.clone();
        for step in once.chunks(2) {
            for j in 0..2 {
                let d = step[j] - anchor[j];
                assert!(d >= lo[j] - 1e-12 && d <= hi[j] + 1e-12, "delta {d}");
                anchor[j] = step[j];
            }
        }
    }

    #[test]
    fn penalty_feasible_input_untouched() {
        let seq = vec![0.05, 0.1, 0.12];
        let params = PenaltyParams::new(0.1, 1e-9, 100);
        let result = penalty_optimize(&[0.0], &seq, &[-0.1], &[0.1], &params);
        assert!(result.converged);
        assert_eq!(result.iterations, 0);
        assert_eq!(result.values, seq);
    }

    #[test]
    fn penalty_first_update_arithmetic() {
        // delta = 0.3, v_max = 0.2, update 0.3 - 0.1 * 0.2 = 0.28.
        let params = PenaltyParams::new(0.1, 1e-12, 1);
        let result = penalty_optimize(&[0.0], &[0.3], &[-0.1], &[0.1], &params);
        assert!((result.values[0] - 0.28).abs() < 1e-15);
        assert!(!result.converged);

        let full = penalty_optimize(
            &[0.0],
            &[0.3],
            &[-0.1],
            &[0.1],
            &PenaltyParams::new(0.1, 1e-6, 1_000),
        );
        assert!(full.converged);
        assert!(full.values[0] <= 0.1 + 1e-6);
    }

    #[test]
    fn penalty_violation_never_increases_for_small_eta() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..5 {
            let seq: Vec<f64> = (0..24).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let params = PenaltyParams::new(0.1, 1e-10, 400);
            let result = penalty_optimize(&[0.0, 0.0], &seq, &[-0.05, -0.05], &[0.05, 0.05], &params);
            for pair in result.violation_trace.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "trial {trial}: violation rose {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn residual_alpha_zero_loss_is_minimized_at_zero_correction() {
        let spec = crate::synth::SynthTaskSpec::new(crate::synth::TaskKind::Reach2d, 1);
        let data = crate::synth::gen_demos(&spec, 2, 1).unwrap();
        let sel = data.selection();
        let mut cfg = ResidualConfig::compact(0.0, 16);
        cfg.train.steps = 40;
        cfg.train.batch_size = 8;
        let (_policy, records) = residual_train(&data, &sel, 6, cfg, 0).unwrap();
        // Zero-initialized output layer starts at the optimum; loss stays ~0.
        assert!(records[0].loss < 1e-12);
        assert!(records.last().unwrap().loss < 1e-6);
    }

    #[test]
    fn residual_has_no_constraint_guarantee() {
        // Untrained (zero correction) residual passes jerky input through;
        // its derivative exceeds the bound.
        let policy = ResidualPolicy::init(ResidualConfig::compact(1.0, 8), 4, 1, 0);
        let chunk = ActionChunk::new(4, 1, vec![0.0, 0.5, -0.5, 0.5], 1.0).unwrap();
        let out = policy.apply(&chunk).unwrap();
        let max_delta = out
            .values
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_delta > 0.1);
    }
}
