//! End-to-end steps shared by the command line and the acceptance suite:
//! fit bins, train, evaluate a checkpoint, and run ablation suites.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, EpisodeRecord};
use crate::decoder::{Decoder, Strategy};
use crate::error::{Error, Result};
use crate::eval::{self, ChainResult, DiffusionPolicy, ReportRow, TrialOutcome};
use crate::predictor::{
    build_samples, read_checkpoint, train, write_checkpoint, Checkpoint, CheckpointMeta, HeadKind, Model, TrainOutcome, TrainState,
};
use crate::rng;
use crate::vocab::{ActionVector, BinSpec, ACTION_DIM};

/// Every `HOLDOUT_EVERY`-th episode is kept out of training for the
/// evaluation loss.
pub const HOLDOUT_EVERY: usize = 20;

pub fn split_holdout(episodes: &[EpisodeRecord]) -> (Vec<EpisodeRecord>, Vec<EpisodeRecord>) {
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1 {
            hold.push(ep.clone());
        } else {
            train.push(ep.clone());
        }
    }
    (train, hold)
}

pub fn fit_bins(episodes: &[EpisodeRecord], cfg: &RunConfig) -> Result<BinSpec> {
    let actions: Vec<ActionVector> = episodes
        .iter()
        .flat_map(|e| e.actions.iter().map(|a| ActionVector::from_array(*a)))
        .collect();
    BinSpec::fit(&actions, cfg.tokenizer.action_vocab, cfg.tokenizer.clip_percentile)
}

/// Expert episodes for `cfg`, generated in memory.
pub fn generate_for(cfg: &RunConfig) -> Result<Vec<EpisodeRecord>> {
    Ok(dataset::generate_episodes(cfg.env.n_episodes, cfg.data_seed(), cfg.env.horizon)?.0)
}

/// Trains (or resumes) a model on `episodes`.
///
/// `on_checkpoint` receives every intermediate and the final checkpoint,
/// each carrying optimizer state so training can resume from it.
pub fn train_model(
    cfg: &RunConfig,
    episodes: &[EpisodeRecord],
    resume: Option<&Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let (train_eps, hold_eps) = split_holdout(episodes);
    if train_eps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bins = fit_bins(&train_eps, cfg)?;
    let k = cfg.tokenizer.chunk_size;
    let samples = build_samples(&train_eps, &bins, &layout, k);
    let holdout = build_samples(&hold_eps, &bins, &layout, k);
    let tcfg = cfg.train_config();

    let state = match resume {
        Some(ck) => {
            if ck.header.train_hash != cfg.training_hash() {
                return Err(Error::Checkpoint("checkpoint was trained with a different configuration".into()));
            }
            ck.train_state(tcfg.optimizer)?
        }
        None => {
            let model = Model::init(cfg.predictor_config()?, &mut rng::stream(tcfg.seed, "train.init", 0));
            TrainState::new(model, &tcfg)
        }
    };
    let meta = CheckpointMeta {
        config: cfg.canonical(),
        config_hash: cfg.hash(),
        train_hash: cfg.training_hash(),
        seed: cfg.seed,
        vocab: layout,
        bins,
        chunk_size: k,
    };
    let make = |s: &TrainState, eval_loss: Option<f64>| Checkpoint::from_state(s, meta.clone(), eval_loss, true);
    let total = tcfg.total_steps(samples.len());
    let TrainOutcome { state, eval_loss } = train(state, &samples, &holdout, &layout, &tcfg, |s| {
        if s.step < total {
            on_checkpoint(&make(s, None))?;
        }
        Ok(())
    })?;
    let ck = make(&state, eval_loss);
    on_checkpoint(&ck)?;
    Ok(ck)
}

/// Short-horizon and chained results of one checkpoint under `cfg`'s
/// decoder and rollout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub outcomes: Vec<TrialOutcome>,
    pub chain: Option<ChainResult>,
}

pub fn check_compatible(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let h = &ck.header;
    if h.vocab != cfg.layout()? || h.chunk_size != cfg.tokenizer.chunk_size || h.bins.bins != cfg.tokenizer.action_vocab {
        return Err(Error::Checkpoint(format!(
            "checkpoint (chunk {}, {} bins) does not match the config (chunk {}, {} bins)",
            h.chunk_size, h.bins.bins, cfg.tokenizer.chunk_size, cfg.tokenizer.action_vocab
        )));
    }
    Ok(())
}

pub fn evaluate(ck: &Checkpoint, cfg: &RunConfig, chained: bool) -> Result<Evaluation> {
    check_compatible(ck, cfg)?;
    let model = ck.model()?;
    let policy = DiffusionPolicy {
        model: &model,
        decoder: Decoder::new(cfg.decode_config(), ck.header.chunk_size, ACTION_DIM)?,
        bins: ck.header.bins.clone(),
        layout: ck.header.vocab,
    };
    let rc = cfg.rollout();
    let outcomes = eval::rollout(&policy, &rc)?;
    let chain = if chained && cfg.eval.chain_trials > 0 {
        Some(eval::eval_chained(&policy, &rc, cfg.eval.chain_trials)?)
    } else {
        None
    };
    Ok(Evaluation { outcomes, chain })
}

/// Supplies trained checkpoints for ablation arms.
pub trait CheckpointSource {
    fn checkpoint(&mut self, cfg: &RunConfig) -> Result<Checkpoint>;
}

/// Trains on a fixed episode set, caching final checkpoints on disk by
/// training hash.
pub struct CachedTrainer {
    pub dir: PathBuf,
    pub episodes: Vec<EpisodeRecord>,
}

impl CachedTrainer {
    pub fn path_for(&self, cfg: &RunConfig) -> PathBuf {
        self.dir.join(format!("ckpt-{}.bin", &cfg.training_hash()[..16]))
    }
}

impl CheckpointSource for CachedTrainer {
    fn checkpoint(&mut self, cfg: &RunConfig) -> Result<Checkpoint> {
        let path = self.path_for(cfg);
        // Unreadable or stale entries are retrained and overwritten.
        if let Ok(ck) = read_checkpoint(&path) {
            if ck.header.train_hash == cfg.training_hash() {
                return Ok(ck);
            }
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let ck = train_model(cfg, &self.episodes, None, |_| Ok(()))?;
        write_checkpoint(&path, &ck)?;
        Ok(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Localized action head vs. full-vocabulary head.
    Lsc,
    /// Hierarchical vs. vanilla decoding of one checkpoint.
    Had,
    /// Chunk sizes 3, 5, 8 and 10.
    Chunk,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsc" => Ok(Suite::Lsc),
            "had" => Ok(Suite::Had),
            "chunk" => Ok(Suite::Chunk),
            other => Err(Error::config(format!("unknown suite {other:?} (expected lsc, had or chunk)"))),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Lsc => "lsc",
            Suite::Had => "had",
            Suite::Chunk => "chunk",
        }
    }
}

pub const CHUNK_SIZES: [usize; 4] = [3, 5, 8, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub config_hash: String,
    pub training_hash: String,
    /// Hash of the arm config with the varied factor reset to the base value.
    pub shared_hash: String,
    /// `"ok"` or the failure message.
    pub status: String,
    /// `(n, successes)` per task id.
    pub per_task: Vec<(usize, usize)>,
    pub chain_histogram: Option<Vec<usize>>,
    pub invalid_trials: usize,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub base_config_hash: String,
    pub seed: u64,
    pub arms: Vec<ArmReport>,
    pub rows: Vec<ReportRow>,
    /// Arm with the highest short-horizon success rate (first on ties).
    pub best_arm: Option<String>,
}

impl AblationReport {
    pub fn csv(&self) -> Result<String> {
        eval::rows_to_csv(&self.rows)
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn row(&self, arm: &str, task: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.arm == arm && r.task == task)
    }

    /// Writes `<suite>.csv` and `<suite>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}.csv", self.suite.name()));
        let json = dir.join(format!("{}.json", self.suite.name()));
        std::fs::write(&csv, self.csv()?).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, self.json()?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

/// The arms of `suite` as `(name, config, config with the varied factor
/// reset to the base)`.
pub fn suite_arms(suite: Suite, base: &RunConfig) -> Vec<(String, RunConfig, RunConfig)> {
    let mut arms = Vec::new();
    match suite {
        Suite::Lsc => {
            for (name, head) in [("localized", HeadKind::Localized), ("full_vocab", HeadKind::FullVocab)] {
                let mut c = base.clone();
                c.model.head = head;
                let mut n = c.clone();
                n.model.head = base.model.head;
                arms.push((name.to_string(), c, n));
            }
        }
        Suite::Had => {
            for (name, strategy) in [("vanilla", Strategy::Vanilla), ("hierarchical", Strategy::Hierarchical)] {
                let mut c = base.clone();
                c.decode.strategy = strategy;
                let mut n = c.clone();
                n.decode.strategy = base.decode.strategy;
                arms.push((name.to_string(), c, n));
            }
        }
        Suite::Chunk => {
            for k in CHUNK_SIZES {
                let mut c = base.clone();
                c.tokenizer.chunk_size = k;
                c.diffusion.steps = k * c.decode.iters_per_action;
                c.eval.m = c.eval.m.min(k);
                let mut n = c.clone();
                n.tokenizer.chunk_size = base.tokenizer.chunk_size;
                n.diffusion.steps = base.diffusion.steps;
                n.eval.m = base.eval.m;
                arms.push((format!("k{k}"), c, n));
            }
        }
    }
    arms
}

/// Runs every arm of `suite`. A failing arm is reported with status and
/// an empty row; the other arms still run.
pub fn run_ablation(suite: Suite, base: &RunConfig, source: &mut dyn CheckpointSource) -> Result<AblationReport> {
    base.validate()?;
    let base_hash = base.hash();
    let chained = suite == Suite::Had;
    let mut report = AblationReport {
        suite,
        base_config_hash: base_hash.clone(),
        seed: base.seed,
        arms: Vec::new(),
        rows: Vec::new(),
        best_arm: None,
    };
    for (name, cfg, normalized) in suite_arms(suite, base) {
        let shared_hash = normalized.hash();
        if shared_hash != base_hash {
            return Err(Error::config(format!("arm {name} differs from the base in more than the varied factor")));
        }
        let mut arm = ArmReport {
            arm: name.clone(),
            config_hash: cfg.hash(),
            training_hash: cfg.training_hash(),
            shared_hash,
            status: "ok".into(),
            per_task: Vec::new(),
            chain_histogram: None,
            invalid_trials: 0,
            eval_loss: None,
        };
        let result = cfg
            .validate()
            .and_then(|()| source.checkpoint(&cfg))
            .and_then(|ck| evaluate(&ck, &cfg, chained).map(|e| (ck.header.eval_loss, e)));
        match result {
            Ok((eval_loss, ev)) => {
                arm.eval_loss = eval_loss;
                arm.per_task = eval::per_task(&ev.outcomes);
                arm.invalid_trials = ev.outcomes.iter().filter(|o| o.invalid).count();
                report.rows.push(ReportRow::short(suite.name(), &name, &ev.outcomes));
                if let Some(c) = &ev.chain {
                    arm.chain_histogram = Some(c.histogram.clone());
                    report.rows.push(ReportRow::chain(suite.name(), &name, c));
                }
            }
            Err(e) => {
                arm.status = format!("failed: {e}");
                report.rows.push(ReportRow::short(suite.name(), &name, &[]));
            }
        }
        report.arms.push(arm);
    }
    let mut best: Option<&ReportRow> = None;
    for r in report.rows.iter().filter(|r| r.task == "short" && r.n > 0) {
        if best.is_none_or(|b| r.rate > b.rate) {
            best = Some(r);
        }
    }
    report.best_arm = best.map(|r| r.arm.clone());
    Ok(report)
}
