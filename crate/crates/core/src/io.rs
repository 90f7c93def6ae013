//! File formats: datasets as JSON Lines with a stats sidecar, model
//! checkpoints as a versioned JSON container.
//!
//! Dataset layout under a directory:
//!   - `episodes.jsonl` — one episode per line:
//!     `{"obs": [[...]], "act": [[...]], "dt": s}`
//!   - `stats.json` — `{"min": [...], "max": [...]}`
//!   - `meta.json` — action dimension, selected indices, task name, seed.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffog::{DiffogConfig, DiffogModel};
use crate::error::{Error, Result};
use crate::synth::{DatasetMeta, DemoDataset, Episode, NormStats};
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeLine {
    obs: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    dt: f64,
}

pub fn write_dataset(dataset: &DemoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut file = fs::File::create(dir.join("episodes.jsonl"))?;
    for ep in &dataset.episodes {
        let line = EpisodeLine {
            obs: ep.observations.clone(),
            act: ep.actions.clone(),
            dt: dataset.meta.dt,
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    let stats = serde_json::to_string_pretty(&dataset.stats)?;
    fs::write(dir.join("stats.json"), stats)?;
    let meta = serde_json::to_string_pretty(&dataset.meta)?;
    fs::write(dir.join("meta.json"), meta)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DemoDataset> {
    let file = fs::File::open(dir.join("episodes.jsonl"))?;
    let mut episodes = Vec::new();
    let mut dt = None;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EpisodeLine = serde_json::from_str(&line)?;
        dt.get_or_insert(parsed.dt);
        episodes.push(Episode {
            observations: parsed.obs,
            actions: parsed.act,
        });
    }
    let stats: NormStats = serde_json::from_str(&fs::read_to_string(dir.join("stats.json"))?)?;
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    Ok(DemoDataset {
        episodes,
        stats,
        meta,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Versioned checkpoint: layer config, parameter tensors, and the
/// normalization statistics the parameters were trained under.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DiffogConfig,
    params: Vec<ParamEntry>,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn from_model(model: &DiffogModel, norm: &NormStats) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
            norm: norm.clone(),
        }
    }

    pub fn into_model(self) -> Result<(DiffogModel, NormStats)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint {
                reason: format!(
                    "version {} unsupported (expected {})",
                    self.version, CHECKPOINT_VERSION
                ),
            });
        }
        let mut store = ParamStore::new();
        for entry in self.params {
            let value = Matrix::from_vec(entry.rows, entry.cols, entry.data)?;
            store.add(entry.name, value);
        }
        let model = DiffogModel::from_store(self.config, store)?;
        Ok((model, self.norm))
    }
}

/// Residual-policy checkpoint in the same container style.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResidualCheckpoint {
    pub version: u32,
    pub config: crate::baselines::ResidualConfig,
    pub horizon: usize,
    pub action_dim: usize,
    pub seed: u64,
    params: Vec<ParamEntry>,
    pub norm: NormStats,
}

impl ResidualCheckpoint {
    pub fn from_policy(policy: &crate::baselines::ResidualPolicy, seed: u64, norm: &NormStats) -> Self {
        let params = policy
            .store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config: policy.config.clone(),
            horizon: policy.horizon,
            action_dim: policy.action_dim,
            seed,
            params,
            norm: norm.clone(),
        }
    }

    pub fn into_policy(self) -> Result<(crate::baselines::ResidualPolicy, NormStats)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint {
                reason: format!(
                    "version {} unsupported (expected {})",
                    self.version, CHECKPOINT_VERSION
                ),
            });
        }
        // Reconstruct the layer layout, then overwrite values.
        let mut policy = crate::baselines::ResidualPolicy::init(
            self.config,
            self.horizon,
            self.action_dim,
            self.seed,
        );
        if policy.store.len() != self.params.len() {
            return Err(Error::BadCheckpoint {
                reason: format!(
                    "expected {} parameters, found {}",
                    policy.store.len(),
                    self.params.len()
                ),
            });
        }
        for (idx, entry) in self.params.into_iter().enumerate() {
            if policy.store.name(idx) != entry.name {
                return Err(Error::BadCheckpoint {
                    reason: format!("parameter {} mismatches the config", entry.name),
                });
            }
            *policy.store.value_mut(idx) = Matrix::from_vec(entry.rows, entry.cols, entry.data)?;
        }
        Ok((policy, self.norm))
    }
}

pub fn save_residual_checkpoint(
    policy: &crate::baselines::ResidualPolicy,
    seed: u64,
    norm: &NormStats,
    path: &Path,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let checkpoint = ResidualCheckpoint::from_policy(policy, seed, norm);
    fs::write(path, serde_json::to_string(&checkpoint)?)?;
    Ok(())
}

pub fn load_residual_checkpoint(
    path: &Path,
) -> Result<(crate::baselines::ResidualPolicy, NormStats)> {
    let json = fs::read_to_string(path)?;
    let checkpoint: ResidualCheckpoint = serde_json::from_str(&json)?;
    checkpoint.into_policy()
}

pub fn save_checkpoint(model: &DiffogModel, norm: &NormStats, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let checkpoint = Checkpoint::from_model(model, norm);
    let json = serde_json::to_string(&checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DiffogModel, NormStats)> {
    let json = fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&json)?;
    checkpoint.into_model()
}
