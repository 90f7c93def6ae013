//! Synthetic demonstration tasks: a 2-D position-controlled point robot with
//! a grasp toggle dimension, minimum-jerk ground-truth trajectories, a
//! replay-style base-policy stub with optional corruption, and a
//! receding-horizon rollout loop shared by every trajectory processor.
//!
//! Raw actions are target positions in the unit workspace `[0, 1]^2` plus a
//! binary grasp value; executing an action moves the point there, so the
//! first derivative of the action stream is a velocity. Success is reaching
//! the goal before the horizon; leaving the workspace is a failure.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trajectory::{ActionChunk, SelectionSpec};

/// Per-dimension min/max mapping raw actions to the normalized `[-1, 1]`
/// range used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn from_episodes<'a>(episodes: impl Iterator<Item = &'a Episode>) -> Self {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for ep in episodes {
            for action in &ep.actions {
                if min.is_empty() {
                    min = action.clone();
                    max = action.clone();
                    continue;
                }
                for (j, v) in action.iter().enumerate() {
                    min[j] = min[j].min(*v);
                    max[j] = max[j].max(*v);
                }
            }
        }
        Self { min, max }
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    fn range(&self, dim: usize) -> f64 {
        self.max[dim] - self.min[dim]
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, v)| {
                let range = self.range(j);
                if range == 0.0 {
                    0.0
                } else {
                    2.0 * (v - self.min[j]) / range - 1.0
                }
            })
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let range = self.range(j);
                if range == 0.0 {
                    self.min[j]
                } else {
                    self.min[j] + (v + 1.0) * range / 2.0
                }
            })
            .collect()
    }

    /// Factor converting a raw per-step delta on `dim` to normalized units.
    pub fn delta_scale(&self, dim: usize) -> f64 {
        let range = self.range(dim);
        if range == 0.0 {
            0.0
        } else {
            2.0 / range
        }
    }

    /// Converts a normalized symmetric rate bound to raw bounds per selected
    /// dimension, so post-hoc processors operating on raw actions enforce
    /// exactly the same constraint.
    pub fn raw_bounds(&self, normalized_bound: f64, selected: &[usize]) -> Vec<f64> {
        selected
            .iter()
            .map(|&dim| {
                let scale = self.delta_scale(dim);
                if scale == 0.0 {
                    f64::INFINITY
                } else {
                    normalized_bound / scale
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub action_dim: usize,
    pub selected: Vec<usize>,
    pub dt: f64,
    pub task: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub episodes: Vec<Episode>,
    pub stats: NormStats,
    pub meta: DatasetMeta,
}

impl DemoDataset {
    pub fn selection(&self) -> SelectionSpec {
        SelectionSpec {
            action_dim: self.meta.action_dim,
            selected: self.meta.selected.clone(),
        }
    }

    /// All (episode, start) windows of the given horizon.
    pub fn windows(&self, horizon: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.actions.len() >= horizon {
                for start in 0..=ep.actions.len() - horizon {
                    out.push((e, start));
                }
            }
        }
        out
    }

    /// A normalized chunk of `horizon` actions starting at `start`. The
    /// chunk carries dt = 1: bounds and smoothing act on per-step deltas of
    /// normalized actions, and the physical step duration stays in the
    /// metadata for metric reporting.
    pub fn normalized_chunk(&self, episode: usize, start: usize, horizon: usize) -> ActionChunk {
        let ep = &self.episodes[episode];
        let mut values = Vec::with_capacity(horizon * self.meta.action_dim);
        for k in 0..horizon {
            values.extend(self.stats.normalize(&ep.actions[start + k]));
        }
        ActionChunk::new(horizon, self.meta.action_dim, values, 1.0).expect("dataset chunk")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Single minimum-jerk segment from start to goal.
    Reach2d,
    /// Several minimum-jerk segments through intermediate waypoints.
    WaypointChain,
    /// Waypoint-chain geometry; the benchmark pairs it with a jerk-injecting
    /// replay policy.
    JerkyReplay,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Reach2d => "reach2d",
            TaskKind::WaypointChain => "waypoint-chain",
            TaskKind::JerkyReplay => "jerky-replay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub kind: TaskKind,
    /// Episode length in steps.
    pub horizon: usize,
    /// Success tolerance on the terminal distance to the goal.
    pub goal_tol: f64,
    /// Square-wave corruption amplitude applied to demonstration actions
    /// (raw units); 0 keeps demonstrations clean.
    pub jerk_amp: f64,
    /// Square-wave half-period in steps.
    pub jerk_period: usize,
    pub seed: u64,
}

impl SynthTaskSpec {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            kind,
            horizon: 120,
            goal_tol: 0.06,
            jerk_amp: 0.0,
            jerk_period: 3,
            seed,
        }
    }

    pub fn action_dim(&self) -> usize {
        3
    }

    pub fn selected(&self) -> Vec<usize> {
        vec![0, 1]
    }

    pub fn dt(&self) -> f64 {
        0.1
    }

    fn validate(&self, horizon_needed: usize) -> Result<()> {
        if self.horizon < horizon_needed {
            return Err(Error::ChunkTooShort {
                len: self.horizon,
                need: horizon_needed,
            });
        }
        Ok(())
    }
}

const WORKSPACE_MARGIN: f64 = 0.15;

/// Quintic minimum-jerk interpolation factor: zero velocity and acceleration
/// at both ends.
fn min_jerk(tau: f64) -> f64 {
    let t3 = tau * tau * tau;
    t3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
}

fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Clean reference positions (one per step, inclusive of the start) for one
/// episode of the task; also returns the goal.
fn reference_positions(spec: &SynthTaskSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let lo = WORKSPACE_MARGIN;
    let hi = 1.0 - WORKSPACE_MARGIN;
    let n_intermediate = match spec.kind {
        TaskKind::Reach2d => 0,
        TaskKind::WaypointChain | TaskKind::JerkyReplay => 2 + (rng.gen::<u64>() % 2) as usize,
    };
    let mut waypoints: Vec<[f64; 2]> = Vec::with_capacity(n_intermediate + 2);
    for _ in 0..n_intermediate + 2 {
        waypoints.push([rng.gen_range(lo..hi), rng.gen_range(lo..hi)]);
    }
    for wp in &waypoints {
        for (dim, v) in wp.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InfeasibleWaypoint { dim, value: *v });
            }
        }
    }
    let goal = *waypoints.last().expect("at least two waypoints");

    // Split the horizon across segments proportionally to their length.
    let segments = waypoints.len() - 1;
    let lengths: Vec<f64> = (0..segments)
        .map(|s| {
            let a = waypoints[s];
            let b = waypoints[s + 1];
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt().max(1e-9)
        })
        .collect();
    let total: f64 = lengths.iter().sum();
    let mut steps_per: Vec<usize> = lengths
        .iter()
        .map(|l| ((l / total) * spec.horizon as f64).floor() as usize)
        .collect();
    let mut assigned: usize = steps_per.iter().sum();
    let mut s = 0;
    while assigned < spec.horizon {
        steps_per[s % segments] += 1;
        assigned += 1;
        s += 1;
    }

    let mut positions = Vec::with_capacity(spec.horizon + 1);
    positions.push(waypoints[0]);
    for seg in 0..segments {
        let a = waypoints[seg];
        let b = waypoints[seg + 1];
        let n = steps_per[seg];
        for k in 1..=n {
            let tau = k as f64 / n as f64;
            let f = min_jerk(tau);
            positions.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
        }
    }
    debug_assert_eq!(positions.len(), spec.horizon + 1);
    Ok((positions, goal))
}

fn square_wave(step: usize, phase: usize, period: usize) -> f64 {
    if ((step + phase) / period.max(1)) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// One full episode: observations `[x, y, goal_x, goal_y]`, actions
/// `[x_next, y_next, grasp]`, optionally corrupted by the spec's jerk wave.
fn build_episode(spec: &SynthTaskSpec, episode: u64) -> Result<(Episode, [f64; 2])> {
    let mut rng = episode_rng(spec.seed, episode);
    let (positions, goal) = reference_positions(spec, &mut rng)?;
    let phase = rng.gen_range(0..2 * spec.jerk_period.max(1));
    let mut observations = Vec::with_capacity(spec.horizon);
    let mut actions = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let pos = positions[t];
        observations.push(vec![pos[0], pos[1], goal[0], goal[1]]);
        let target = positions[t + 1];
        let grasp = if t >= spec.horizon / 2 { 1.0 } else { 0.0 };
        let mut action = vec![target[0], target[1], grasp];
        if spec.jerk_amp > 0.0 {
            for dim in 0..2 {
                let sign = square_wave(t, phase + dim, spec.jerk_period);
                action[dim] = (action[dim] + sign * spec.jerk_amp).clamp(0.0, 1.0);
            }
        }
        actions.push(action);
    }
    Ok((
        Episode {
            observations,
            actions,
        },
        goal,
    ))
}

/// Generates a reproducible demonstration dataset.
pub fn gen_demos(spec: &SynthTaskSpec, n_episodes: usize, seed: u64) -> Result<DemoDataset> {
    spec.validate(2)?;
    let spec = SynthTaskSpec { seed, ..spec.clone() };
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let (episode, _) = build_episode(&spec, e as u64)?;
        episodes.push(episode);
    }
    let stats = NormStats::from_episodes(episodes.iter());
    Ok(DemoDataset {
        episodes,
        stats,
        meta: DatasetMeta {
            action_dim: spec.action_dim(),
            selected: spec.selected(),
            dt: spec.dt(),
            task: spec.kind.to_string(),
            seed,
        },
    })
}

/// Base-policy stand-in: replays the rollout's reference trajectory, with
/// optional corruption emulating an imperfect learned policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicyMode {
    Replay,
    /// Constant offset added to the position dimensions.
    ReplayOffset { offset: [f64; 2] },
    /// Square-wave jerk on the position dimensions.
    ReplayJerk { amp: f64, period: usize },
    /// Replays the dataset episode whose initial observation is nearest to
    /// the rollout's.
    NearestNeighbor,
}

#[derive(Debug, Clone)]
pub struct BasePolicyStub {
    pub mode: PolicyMode,
    pub seed: u64,
}

impl BasePolicyStub {
    pub fn new(mode: PolicyMode, seed: u64) -> Self {
        Self { mode, seed }
    }

    /// Raw action chunk of length `horizon` starting at step `t`.
    pub fn chunk(
        &self,
        reference: &Episode,
        dataset: Option<&DemoDataset>,
        t: usize,
        horizon: usize,
        dt: f64,
    ) -> ActionChunk {
        let source: &Episode = match &self.mode {
            PolicyMode::NearestNeighbor => {
                let obs = &reference.observations[0];
                dataset
                    .and_then(|d| {
                        d.episodes.iter().min_by(|a, b| {
                            let da = sq_dist(&a.observations[0], obs);
                            let db = sq_dist(&b.observations[0], obs);
                            da.partial_cmp(&db).expect("finite distances")
                        })
                    })
                    .unwrap_or(reference)
            }
            _ => reference,
        };
        let dim = source.actions[0].len();
        let last = source.actions.len() - 1;
        let mut values = Vec::with_capacity(horizon * dim);
        for k in 0..horizon {
            let step = (t + k).min(last);
            let mut action = source.actions[step].clone();
            match &self.mode {
                PolicyMode::ReplayOffset { offset } => {
                    action[0] += offset[0];
                    action[1] += offset[1];
                }
                PolicyMode::ReplayJerk { amp, period } => {
                    let phase = (self.seed % (2 * *period as u64).max(1)) as usize;
                    for d in 0..2 {
                        let sign = square_wave(t + k, phase + d, *period);
                        action[d] += sign * amp;
                    }
                }
                _ => {}
            }
            values.extend(action);
        }
        ActionChunk::new(horizon, dim, values, dt).expect("policy chunk")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trajectory processor plugged into the rollout loop. Chunks are raw
/// actions; `prev_selected` holds the previously executed action's selected
/// dimensions (raw) and `exec_step` the index of the first step about to be
/// executed.
pub trait ChunkProcessor {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        prev_selected: Option<&[f64]>,
        exec_step: usize,
    ) -> Result<ActionChunk>;
}

/// Pass-through processor (the bare base policy).
pub struct NoProcessor;

impl ChunkProcessor for NoProcessor {
    fn process(
        &mut self,
        chunk: &ActionChunk,
        _prev_selected: Option<&[f64]>,
        _exec_step: usize,
    ) -> Result<ActionChunk> {
        Ok(chunk.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Executed raw actions, one row per step.
    pub executed: Matrix,
    /// Clean reference actions over the same steps.
    pub reference: Matrix,
    pub success: bool,
    pub left_workspace: bool,
    pub steps: usize,
}

impl RolloutResult {
    /// Mean squared distance between executed and reference positions.
    pub fn mse_to_reference(&self, selected: &[usize]) -> f64 {
        let steps = self.executed.rows();
        if steps == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..steps {
            for &j in selected {
                let d = self.executed.get(i, j) - self.reference.get(i, j);
                total += d * d;
            }
        }
        total / steps as f64
    }
}

/// Receding-horizon rollout: plan a chunk of `plan_horizon` actions, run the
/// processor, execute the first `exec_horizon`, replan. The previously
/// executed action is handed to the processor so inference-time linking
/// constraints can bind across chunk boundaries.
pub fn rollout(
    spec: &SynthTaskSpec,
    init_seed: u64,
    policy: &BasePolicyStub,
    dataset: Option<&DemoDataset>,
    processor: &mut dyn ChunkProcessor,
    plan_horizon: usize,
    exec_horizon: usize,
) -> Result<RolloutResult> {
    debug_assert!(exec_horizon >= 1 && exec_horizon <= plan_horizon);
    spec.validate(plan_horizon)?;
    let rollout_spec = SynthTaskSpec {
        jerk_amp: 0.0,
        ..spec.clone()
    };
    let (reference, goal) = build_episode(&rollout_spec, init_seed)?;
    let selected = spec.selected();
    let dt = spec.dt();

    let mut executed_rows: Vec<Vec<f64>> = Vec::with_capacity(spec.horizon);
    let mut prev: Option<Vec<f64>> = None;
    let mut success = false;
    let mut left_workspace = false;
    let mut t = 0;

    'outer: while t < spec.horizon {
        let chunk = policy.chunk(&reference, dataset, t, plan_horizon, dt);
        let processed = processor.process(&chunk, prev.as_deref(), t)?;
        let exec_now = exec_horizon.min(spec.horizon - t);
        for k in 0..exec_now {
            let action = processed.step(k).to_vec();
            for &dim in &selected {
                if !(0.0..=1.0).contains(&action[dim]) {
                    left_workspace = true;
                }
            }
            prev = Some(selected.iter().map(|&d| action[d]).collect());
            executed_rows.push(action.clone());
            t += 1;
            let dist =
                ((action[0] - goal[0]).powi(2) + (action[1] - goal[1]).powi(2)).sqrt();
            if left_workspace {
                break 'outer;
            }
            if dist <= spec.goal_tol && t >= spec.horizon / 2 {
                success = true;
                break 'outer;
            }
        }
    }

    let steps = executed_rows.len();
    let dim = spec.action_dim();
    let executed = Matrix::from_fn(steps, dim, |i, j| executed_rows[i][j]);
    let reference_mat = Matrix::from_fn(steps, dim, |i, j| reference.actions[i][j]);
    Ok(RolloutResult {
        executed,
        reference: reference_mat,
        success: success && !left_workspace,
        left_workspace,
        steps,
    })
}
