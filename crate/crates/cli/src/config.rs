//! Resolved run configurations. Every command archives its exact resolved
//! config next to its outputs; re-running from that file reproduces the
//! numeric outputs bitwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use diffog_core::baselines::PenaltyParams;
use diffog_core::synth::{PolicyMode, SynthTaskSpec, TaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    GenData(GenDataConfig),
    Train(TrainRunConfig),
    Eval(EvalConfig),
    Compare(CompareConfig),
    Report(ReportConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub task: TaskKind,
    pub episodes: usize,
    pub horizon: usize,
    pub goal_tol: f64,
    pub jerk_amp: f64,
    pub jerk_period: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl GenDataConfig {
    pub fn task_spec(&self) -> SynthTaskSpec {
        SynthTaskSpec {
            kind: self.task,
            horizon: self.horizon,
            goal_tol: self.goal_tol,
            jerk_amp: self.jerk_amp,
            jerk_period: self.jerk_period,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Transformer variant, supervised directly on demonstration chunks.
    Dataset,
    /// Transformer variant, refining a frozen base policy toward the
    /// demonstrations.
    Refine,
    /// Residual correction baseline.
    Residual,
    /// Matrix-learning variant on demonstration chunks.
    Matrix,
    /// Identity cost: nothing to train.
    StaticNoop,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub mode: TrainMode,
    pub alpha: f64,
    pub bound: f64,
    pub value_bound: Option<f64>,
    pub horizon: usize,
    pub exec_horizon: usize,
    pub embed_dim: usize,
    pub feedforward_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub passthrough: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub base_policy: PolicySpec,
    /// Hidden width of the residual network (residual mode only).
    pub residual_width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub inits: usize,
    pub policy_seeds: Vec<u64>,
    pub base_policy: PolicySpec,
    pub sweep_alpha: Option<Vec<f64>>,
    pub sweep_bound: Option<Vec<f64>>,
    pub schedule: Option<String>,
    pub diagonality_trace: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub residual_checkpoint: PathBuf,
    pub out: PathBuf,
    pub inits: usize,
    pub policy_seeds: Vec<u64>,
    pub base_policy: PolicySpec,
    pub bound: f64,
    pub penalty_eta: f64,
    pub penalty_tol: f64,
    pub penalty_max_iter: usize,
    pub format: OutputFormat,
}

impl CompareConfig {
    pub fn penalty_params(&self) -> PenaltyParams {
        PenaltyParams::new(self.penalty_eta, self.penalty_tol, self.penalty_max_iter)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Replay,
    ReplayJerk,
    ReplayOffset,
    NearestNeighbor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub jerk_amp: f64,
    pub jerk_period: usize,
    pub offset: [f64; 2],
    pub seed: u64,
}

impl PolicySpec {
    pub fn mode(&self) -> PolicyMode {
        match self.kind {
            PolicyKind::Replay => PolicyMode::Replay,
            PolicyKind::ReplayJerk => PolicyMode::ReplayJerk {
                amp: self.jerk_amp,
                period: self.jerk_period,
            },
            PolicyKind::ReplayOffset => PolicyMode::ReplayOffset {
                offset: self.offset,
            },
            PolicyKind::NearestNeighbor => PolicyMode::NearestNeighbor,
        }
    }

    pub fn stub(&self) -> diffog_core::synth::BasePolicyStub {
        diffog_core::synth::BasePolicyStub::new(self.mode(), self.seed)
    }
}

/// Writes the resolved config next to the outputs.
pub fn archive(config: &RunConfig, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(dir.join("config.json"), json)
}

pub fn load(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("read {path:?}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("parse {path:?}: {e}"))
}
