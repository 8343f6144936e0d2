//! Expert demonstration datasets (JSON lines, one episode per line).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{self, TaskDistribution};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{ActionVector, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub seed: u64,
    /// Observation before each action.
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn action(&self, i: usize) -> ActionVector {
        ActionVector::from_array(self.actions[i])
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Rolls out the scripted expert from `reset(seed)`.
pub fn expert_episode(seed: u64, horizon: usize) -> EpisodeRecord {
    let (mut world, task, mut obs) = env::reset(seed, TaskDistribution::Short, horizon);
    let mut record = EpisodeRecord {
        task_id: task.task_id,
        seed,
        obs: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    for _ in 0..horizon {
        let a = env::scripted_expert(&world, &task);
        record.obs.push(obs);
        record.actions.push(a.to_array());
        world.step(&a);
        obs = env::observe(&world, &task);
        if env::success(&world, &task) {
            record.success = true;
            break;
        }
    }
    record
}

/// Replays recorded actions from the episode seed; true if every recorded
/// observation is reproduced exactly.
pub fn replay_matches(record: &EpisodeRecord, horizon: usize) -> bool {
    let (mut world, task, mut obs) = env::reset(record.seed, TaskDistribution::Short, horizon);
    if task.task_id != record.task_id {
        return false;
    }
    for (recorded, a) in record.obs.iter().zip(&record.actions) {
        if *recorded != obs {
            return false;
        }
        world.step(&ActionVector::from_array(*a));
        obs = env::observe(&world, &task);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub attempted: usize,
    pub failed_excluded: usize,
    pub total_steps: usize,
    pub mean_length: f64,
    pub median_length: usize,
    pub action_min: [f64; ACTION_DIM],
    pub action_max: [f64; ACTION_DIM],
    pub seed: u64,
    pub config_hash: String,
    /// Hex SHA-256 of the dataset file.
    pub sha256: String,
}

/// Generates `n` successful expert episodes; failed rollouts are dropped.
pub fn generate_episodes(n: usize, seed: u64, horizon: usize) -> Result<(Vec<EpisodeRecord>, usize)> {
    if n == 0 {
        return Err(Error::config("need at least one episode"));
    }
    let mut episodes = Vec::with_capacity(n);
    let mut attempted = 0u64;
    while episodes.len() < n {
        if attempted as usize > 4 * n + 100 {
            return Err(Error::config("expert failed too often; check env settings"));
        }
        let ep = expert_episode(rng::item_seed(seed, "data", attempted), horizon);
        attempted += 1;
        if ep.success {
            episodes.push(ep);
        }
    }
    Ok((episodes, attempted as usize))
}

pub fn summarize(episodes: &[EpisodeRecord], attempted: usize, seed: u64, config_hash: &str, sha256: String) -> DatasetSummary {
    let mut lengths: Vec<usize> = episodes.iter().map(EpisodeRecord::len).collect();
    lengths.sort_unstable();
    let total: usize = lengths.iter().sum();
    let mut lo = [f64::INFINITY; ACTION_DIM];
    let mut hi = [f64::NEG_INFINITY; ACTION_DIM];
    for a in episodes.iter().flat_map(|e| &e.actions) {
        for d in 0..ACTION_DIM {
            lo[d] = lo[d].min(a[d]);
            hi[d] = hi[d].max(a[d]);
        }
    }
    DatasetSummary {
        episodes: episodes.len(),
        attempted,
        failed_excluded: attempted - episodes.len(),
        total_steps: total,
        mean_length: total as f64 / episodes.len().max(1) as f64,
        median_length: lengths.get(lengths.len() / 2).copied().unwrap_or(0),
        action_min: lo,
        action_max: hi,
        seed,
        config_hash: config_hash.to_string(),
        sha256,
    }
}

/// Path of the summary sidecar for a dataset file.
pub fn summary_path(data: &Path) -> std::path::PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".summary.json");
    s.into()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            source: e,
        })?);
    }
    Ok(out)
}

/// Generates a dataset file plus its summary sidecar.
pub fn generate_dataset(n: usize, seed: u64, horizon: usize, config_hash: &str, out: &Path) -> Result<DatasetSummary> {
    let (episodes, attempted) = generate_episodes(n, seed, horizon)?;
    write_episodes(out, &episodes)?;
    let summary = summarize(&episodes, attempted, seed, config_hash, sha256_file(out)?);
    let side = summary_path(out);
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(summary)
}
