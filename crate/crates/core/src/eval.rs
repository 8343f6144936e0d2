//! Closed-loop evaluation: rollouts, chained tasks, Wilson intervals and
//! report rows.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, MaskPredictor};
use crate::env::{self, TaskDistribution, TaskSpec, WorldState, N_TASKS};
use crate::error::{Error, Result};
use crate::predictor::Conditioning;
use crate::rng::{self, StreamRng};
use crate::vocab::{ActionVector, BinSpec, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkExecution {
    /// Execute every action of a chunk before decoding again.
    #[default]
    Full,
    /// Execute only the first `m` actions.
    FirstM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub n_trials: usize,
    pub chunk_execution: ChunkExecution,
    pub m: usize,
    pub horizon_limit: usize,
    pub seed: u64,
    pub timing: bool,
}

impl RolloutConfig {
    pub fn validate(&self, chunk_size: usize) -> Result<()> {
        if self.chunk_execution == ChunkExecution::FirstM && (self.m == 0 || self.m > chunk_size) {
            return Err(Error::config(format!("m = {} must lie in 1..={chunk_size}", self.m)));
        }
        Ok(())
    }

    /// Number of actions of a `k`-chunk that are executed.
    pub fn executed(&self, k: usize) -> usize {
        match self.chunk_execution {
            ChunkExecution::Full => k,
            ChunkExecution::FirstM => self.m.min(k),
        }
    }
}

/// What a policy proposes for the current state.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Actions(Vec<ActionVector>),
    /// The policy produced tokens that do not decode to an action.
    Invalid(String),
}

pub trait Policy {
    /// Next actions given the observation. `world` is only for privileged
    /// baselines such as the scripted expert.
    fn propose(&self, obs: &[f64], task: &TaskSpec, world: &WorldState, rng: &mut StreamRng) -> Result<Proposal>;
}

/// A trained mask predictor decoded into action chunks.
pub struct DiffusionPolicy<'a, M: ?Sized> {
    pub model: &'a M,
    pub decoder: Decoder,
    pub bins: BinSpec,
    pub layout: VocabLayout,
}

impl<M: MaskPredictor + ?Sized> Policy for DiffusionPolicy<'_, M> {
    fn propose(&self, obs: &[f64], task: &TaskSpec, _: &WorldState, rng: &mut StreamRng) -> Result<Proposal> {
        let cond = Conditioning {
            observation: obs.to_vec(),
            task_id: task.task_id,
        };
        let out = self.decoder.decode(self.model, &task.prompt_tokens(), &cond, &self.layout, rng)?;
        match out.chunk()?.detokenize(&self.bins, &self.layout) {
            Ok(chunk) => Ok(Proposal::Actions(chunk.actions)),
            Err(e @ Error::NotActionToken { .. }) => Ok(Proposal::Invalid(e.to_string())),
            Err(e) => Err(e),
        }
    }
}

/// Uniformly random single actions.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn propose(&self, _: &[f64], _: &TaskSpec, _: &WorldState, rng: &mut StreamRng) -> Result<Proposal> {
        Ok(Proposal::Actions(vec![env::random_action(rng)]))
    }
}

/// The scripted expert, replanning every step.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn propose(&self, _: &[f64], task: &TaskSpec, world: &WorldState, _: &mut StreamRng) -> Result<Proposal> {
        Ok(Proposal::Actions(vec![env::scripted_expert(world, task)]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub task_id: usize,
    pub success: bool,
    pub steps: usize,
    pub decode_calls: usize,
    /// The policy emitted an undecodable chunk; the trial counts as failed.
    pub invalid: bool,
    pub decode_ms: f64,
}

/// Runs `task` from `world` until success, the horizon, or an invalid chunk.
pub fn run_task<P: Policy + ?Sized>(
    policy: &P,
    world: &mut WorldState,
    task: &TaskSpec,
    cfg: &RolloutConfig,
    rng: &mut StreamRng,
) -> Result<TrialOutcome> {
    let mut out = TrialOutcome {
        task_id: task.task_id,
        success: false,
        steps: 0,
        decode_calls: 0,
        invalid: false,
        decode_ms: 0.0,
    };
    while out.steps < cfg.horizon_limit {
        let obs = env::observe(world, task);
        let start = cfg.timing.then(Instant::now);
        let proposal = policy.propose(&obs, task, world, rng)?;
        if let Some(s) = start {
            out.decode_ms += s.elapsed().as_secs_f64() * 1e3;
        }
        out.decode_calls += 1;
        let actions = match proposal {
            Proposal::Actions(a) => a,
            Proposal::Invalid(_) => {
                out.invalid = true;
                return Ok(out);
            }
        };
        let n = cfg.executed(actions.len());
        for a in &actions[..n] {
            world.step(a);
            out.steps += 1;
            if env::success(world, task) {
                out.success = true;
                return Ok(out);
            }
            if out.steps >= cfg.horizon_limit {
                break;
            }
        }
    }
    Ok(out)
}

/// Environment seed of short-horizon trial `i`; shared by every arm.
pub fn trial_seed(cfg: &RolloutConfig, i: usize) -> u64 {
    rng::item_seed(cfg.seed, "eval.env", i as u64)
}

/// `cfg.n_trials` short-horizon episodes with tasks drawn uniformly.
pub fn rollout<P: Policy + ?Sized>(policy: &P, cfg: &RolloutConfig) -> Result<Vec<TrialOutcome>> {
    (0..cfg.n_trials)
        .map(|i| {
            let (mut world, task, _) = env::reset(trial_seed(cfg, i), TaskDistribution::Short, cfg.horizon_limit);
            let mut r = rng::stream(cfg.seed, "eval.decode", i as u64);
            run_task(policy, &mut world, &task, cfg, &mut r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    /// `histogram[c]` trials completed exactly `c` tasks in a row.
    pub histogram: Vec<usize>,
    pub avg_len: f64,
    pub n_trials: usize,
    pub decode_ms: f64,
    pub decode_calls: usize,
}

/// Scores chains of tasks sharing one world; task `i + 1` starts only if
/// task `i` succeeded, each with its own horizon.
pub fn eval_chained<P: Policy + ?Sized>(policy: &P, cfg: &RolloutConfig, n_trials: usize) -> Result<ChainResult> {
    let mut histogram = Vec::new();
    let mut decode_ms = 0.0;
    let mut decode_calls = 0;
    for i in 0..n_trials {
        let (mut world, chain) = env::reset_chain(rng::item_seed(cfg.seed, "eval.chain", i as u64), cfg.horizon_limit);
        if histogram.is_empty() {
            histogram = vec![0; chain.len() + 1];
        }
        let mut r = rng::stream(cfg.seed, "eval.chain_decode", i as u64);
        let mut done = 0;
        for task in &chain {
            let o = run_task(policy, &mut world, task, cfg, &mut r)?;
            decode_ms += o.decode_ms;
            decode_calls += o.decode_calls;
            if !o.success {
                break;
            }
            done += 1;
        }
        histogram[done] += 1;
    }
    if n_trials == 0 {
        return Err(Error::config("chained evaluation needs at least one trial"));
    }
    let avg_len = histogram.iter().enumerate().map(|(c, &n)| (c * n) as f64).sum::<f64>() / n_trials as f64;
    Ok(ChainResult {
        histogram,
        avg_len,
        n_trials,
        decode_ms,
        decode_calls,
    })
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize) -> (f64, f64) {
    const Z: f64 = 1.959_963_984_540_054;
    if n == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub suite: String,
    pub arm: String,
    pub task: String,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Average chain length; empty for short-horizon rows.
    pub avg_len: Option<f64>,
    pub decode_ms_mean: f64,
}

impl ReportRow {
    pub fn short(suite: &str, arm: &str, outcomes: &[TrialOutcome]) -> Self {
        let n = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let calls: usize = outcomes.iter().map(|o| o.decode_calls).sum();
        let ms: f64 = outcomes.iter().map(|o| o.decode_ms).sum();
        Self::from_counts(suite, arm, "short", successes, n, None, mean(ms, calls))
    }

    /// Full completion of the chain counts as a success.
    pub fn chain(suite: &str, arm: &str, c: &ChainResult) -> Self {
        let successes = *c.histogram.last().unwrap_or(&0);
        Self::from_counts(suite, arm, "chain", successes, c.n_trials, Some(c.avg_len), mean(c.decode_ms, c.decode_calls))
    }

    fn from_counts(suite: &str, arm: &str, task: &str, successes: usize, n: usize, avg_len: Option<f64>, ms: f64) -> Self {
        let (ci_lo, ci_hi) = wilson(successes, n);
        Self {
            suite: suite.into(),
            arm: arm.into(),
            task: task.into(),
            n,
            successes,
            rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            ci_lo,
            ci_hi,
            avg_len,
            decode_ms_mean: ms,
        }
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Success counts per task id, `(n, successes)`.
pub fn per_task(outcomes: &[TrialOutcome]) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); N_TASKS];
    for o in outcomes {
        out[o.task_id].0 += 1;
        out[o.task_id].1 += usize::from(o.success);
    }
    out
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
