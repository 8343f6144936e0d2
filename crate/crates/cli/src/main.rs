use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mdpolicy::config::{Profile, RunConfig};
use mdpolicy::dataset;
use mdpolicy::decoder::{Decoder, Strategy};
use mdpolicy::env::{self, TaskDistribution};
use mdpolicy::eval::{self, ReportRow};
use mdpolicy::pipeline::{self, CachedTrainer, CheckpointSource, Suite};
use mdpolicy::predictor::{self, Checkpoint, Conditioning};
use mdpolicy::rng;
use mdpolicy::vocab::ACTION_DIM;

#[derive(Parser)]
#[command(name = "mdpolicy", version, about = "Masked-diffusion action policies on a planar pick-and-place benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "default")]
    profile: String,
    /// Override a config value, e.g. `--set train.epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations as JSONL plus a summary sidecar.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file; defaults to paths.dataset.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of episodes; defaults to env.n_episodes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit bins and train a predictor; writes a checkpoint and a loss curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; defaults to paths.dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path; defaults to paths.checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or run an ablation suite.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate; required without --suite. The had suite
        /// decodes with it instead of training its own model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// lsc, had or chunk.
        #[arg(long)]
        suite: Option<String>,
        /// Dataset used to train the suite arms that need their own model.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to paths.report_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Dump the per-step trace of one decode as JSONL.
    DecodeTrace {
        /// Checkpoint whose predictor and decoding config are traced.
        #[arg(long)]
        ckpt: PathBuf,
        /// Environment seed for the observation being decoded.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// vanilla or hierarchical; defaults to the checkpoint's config.
        #[arg(long)]
        strategy: Option<String>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that artifacts match their recorded hashes.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A dataset written by `gen-data`; its sha256 and config hash are
        /// checked against the sidecar.
        #[arg(long)]
        data: Option<PathBuf>,
        /// A checkpoint written by `train`; its training settings must match the config.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// A report JSON written by `eval`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Failures split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mdpolicy::Error> for Failure {
    fn from(e: mdpolicy::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { cfg, out, n } => gen_data(&load_config(&cfg)?, out, n),
        Command::Train { cfg, data, out, resume } => train(&load_config(&cfg)?, data, out, resume),
        Command::Eval {
            cfg,
            ckpt,
            suite,
            data,
            out_dir,
        } => {
            let config = load_config(&cfg)?;
            let suite = suite.map(|s| s.parse::<Suite>()).transpose().map_err(usage)?;
            evaluate(&config, ckpt, suite, data, out_dir)
        }
        Command::DecodeTrace {
            ckpt,
            seed,
            strategy,
            out,
        } => decode_trace(&ckpt, seed, strategy.as_deref(), out),
        Command::Verify { cfg, data, ckpt, report } => verify(&load_config(&cfg)?, data, ckpt, report),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::profile(args.profile.parse::<Profile>().map_err(usage)?),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(usage)?;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>, n: Option<usize>) -> CmdResult {
    let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    let n = n.unwrap_or(cfg.env.n_episodes);
    if n == 0 {
        return Err(usage(anyhow!("--n must be positive")));
    }
    ensure_parent(&out)?;
    let summary = dataset::generate_dataset(n, cfg.data_seed(), cfg.env.horizon, &cfg.hash(), &out)?;
    print_json(&summary)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_episodes(cfg: &RunConfig, data: Option<PathBuf>) -> anyhow::Result<Vec<dataset::EpisodeRecord>> {
    let path = data.unwrap_or_else(|| cfg.paths.dataset.clone());
    Ok(dataset::read_episodes(&path)?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn curve_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".curve.csv")
}

/// Intermediate checkpoint written at `step`.
fn step_path(ckpt: &Path, step: u64) -> PathBuf {
    with_suffix(ckpt, &format!(".step-{step}"))
}

fn train(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let episodes = load_episodes(cfg, data)?;
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    ensure_parent(&out)?;
    let resume = resume.map(|p| predictor::read_checkpoint(&p)).transpose()?;
    let total = final_step(cfg, &episodes);
    let ck = pipeline::train_model(cfg, &episodes, resume.as_ref(), |ck| {
        if ck.header.step < total {
            let path = step_path(&out, ck.header.step);
            predictor::write_checkpoint(&path, ck)?;
            eprintln!("step {}/{total}: wrote {}", ck.header.step, path.display());
            Ok(())
        } else {
            predictor::write_checkpoint(&out, ck)
        }
    })?;
    let curve = curve_path(&out);
    std::fs::write(&curve, predictor::curve_csv(&ck.header.curve)).with_context(|| format!("writing {}", curve.display()))?;
    print_json(&serde_json::json!({
        "checkpoint": out,
        "loss_curve": curve,
        "config_hash": ck.header.config_hash,
        "seed": ck.header.seed,
        "steps": ck.header.step,
        "params": ck.header.param_count,
        "final_loss": ck.header.curve.last().map(|p| p.loss),
        "eval_loss": ck.header.eval_loss,
    }))?;
    Ok(())
}

/// Total optimizer steps the run will take.
fn final_step(cfg: &RunConfig, episodes: &[dataset::EpisodeRecord]) -> u64 {
    let (train_eps, _) = pipeline::split_holdout(episodes);
    let samples: usize = train_eps.iter().map(|e| e.len()).sum();
    cfg.train_config().total_steps(samples)
}

/// Uses the given checkpoint for arms it was trained for and trains the rest.
struct Source {
    given: Option<Checkpoint>,
    trainer: CachedTrainer,
}

impl CheckpointSource for Source {
    fn checkpoint(&mut self, cfg: &RunConfig) -> mdpolicy::Result<Checkpoint> {
        match &self.given {
            Some(ck) if ck.header.train_hash == cfg.training_hash() => Ok(ck.clone()),
            _ => self.trainer.checkpoint(cfg),
        }
    }
}

fn evaluate(
    cfg: &RunConfig,
    ckpt: Option<PathBuf>,
    suite: Option<Suite>,
    data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> CmdResult {
    let dir = out_dir.unwrap_or_else(|| cfg.paths.report_dir.clone());
    let given = ckpt.map(|p| predictor::read_checkpoint(&p)).transpose()?;
    match suite {
        Some(suite) => {
            let needs_training = suite != Suite::Had || given.is_none();
            let episodes = if needs_training {
                match data {
                    Some(p) => dataset::read_episodes(&p)?,
                    None => pipeline::generate_for(cfg)?,
                }
            } else {
                Vec::new()
            };
            let mut source = Source {
                given,
                trainer: CachedTrainer {
                    dir: dir.join("checkpoints"),
                    episodes,
                },
            };
            let report = pipeline::run_ablation(suite, cfg, &mut source)?;
            let (csv, json) = report.write(&dir)?;
            eprint!("{}", report.csv()?);
            print_json(&serde_json::json!({
                "suite": suite.name(),
                "csv": csv,
                "json": json,
                "best_arm": report.best_arm,
                "config_hash": report.base_config_hash,
            }))?;
        }
        None => {
            let ck = given.ok_or_else(|| usage(anyhow!("--ckpt is required without --suite")))?;
            let ev = pipeline::evaluate(&ck, cfg, true)?;
            let arm = strategy_name(cfg.decode.strategy);
            let mut rows = vec![ReportRow::short("eval", arm, &ev.outcomes)];
            if let Some(c) = &ev.chain {
                rows.push(ReportRow::chain("eval", arm, c));
            }
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let csv = dir.join("eval.csv");
            let json = dir.join("eval.json");
            std::fs::write(&csv, eval::rows_to_csv(&rows)?).with_context(|| format!("writing {}", csv.display()))?;
            let report = serde_json::json!({
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "checkpoint_config_hash": ck.header.config_hash,
                "rows": rows,
                "per_task": eval::per_task(&ev.outcomes),
                "chain_histogram": ev.chain.as_ref().map(|c| &c.histogram),
            });
            std::fs::write(&json, serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")
                .with_context(|| format!("writing {}", json.display()))?;
            eprint!("{}", eval::rows_to_csv(&rows)?);
            print_json(&serde_json::json!({ "csv": csv, "json": json, "config_hash": cfg.hash() }))?;
        }
    }
    Ok(())
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Vanilla => "vanilla",
        Strategy::Hierarchical => "hierarchical",
    }
}

fn decode_trace(ckpt: &Path, seed: u64, strategy: Option<&str>, out: Option<PathBuf>) -> CmdResult {
    let ck = predictor::read_checkpoint(ckpt)?;
    let mut cfg = RunConfig::from_toml_str(&ck.header.config).context("checkpoint config")?;
    if let Some(s) = strategy {
        cfg.decode.strategy = match s {
            "vanilla" => Strategy::Vanilla,
            "hierarchical" => Strategy::Hierarchical,
            other => return Err(usage(anyhow!("unknown strategy {other:?} (expected vanilla or hierarchical)"))),
        };
    }
    let model = ck.model()?;
    let decoder = Decoder::new(cfg.decode_config(), ck.header.chunk_size, ACTION_DIM)?;
    let (_, task, obs) = env::reset(seed, TaskDistribution::Short, cfg.eval.horizon);
    let cond = Conditioning {
        observation: obs,
        task_id: task.task_id,
    };
    let mut stream = rng::stream(cfg.decode_config().seed, "trace.decode", seed);
    let decoded = decoder.decode(&model, &task.prompt_tokens(), &cond, &ck.header.vocab, &mut stream)?;
    let text = decoded.trace.to_jsonl(&cfg.hash(), seed)?;
    match out {
        Some(path) => {
            ensure_parent(&path)?;
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn verify(cfg: &RunConfig, data: Option<PathBuf>, ckpt: Option<PathBuf>, report: Option<PathBuf>) -> CmdResult {
    let hash = cfg.hash();
    let reparsed = RunConfig::from_toml_str(&cfg.canonical())?;
    if reparsed.hash() != hash {
        bail_runtime("config does not re-hash to the same value")?;
    }
    let mut checks = vec![serde_json::json!({ "config_hash": hash })];
    if data.is_none() && ckpt.is_none() && report.is_none() {
        return Err(usage(anyhow!("nothing to verify: pass --data, --ckpt or --report")));
    }
    if let Some(path) = data {
        let side = dataset::summary_path(&path);
        let text = std::fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
        let summary: dataset::DatasetSummary = serde_json::from_str(&text).with_context(|| side.display().to_string())?;
        let actual = dataset::sha256_file(&path)?;
        if actual != summary.sha256 {
            bail_runtime(format!("{}: sha256 {actual} does not match the sidecar", path.display()))?;
        }
        if summary.config_hash != hash {
            bail_runtime(format!("{}: produced by config {}, not {hash}", path.display(), summary.config_hash))?;
        }
        checks.push(serde_json::json!({ "dataset": path, "sha256": actual }));
    }
    if let Some(path) = ckpt {
        let ck = predictor::read_checkpoint(&path)?;
        let embedded = RunConfig::from_toml_str(&ck.header.config).context("checkpoint config")?;
        if embedded.hash() != ck.header.config_hash {
            bail_runtime(format!("{}: embedded config does not match its hash", path.display()))?;
        }
        if ck.header.train_hash != cfg.training_hash() {
            bail_runtime(format!("{}: trained with different settings than the config", path.display()))?;
        }
        checks.push(serde_json::json!({ "checkpoint": path, "config_hash": ck.header.config_hash }));
    }
    if let Some(path) = report {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
        let recorded = v
            .get("base_config_hash")
            .or_else(|| v.get("config_hash"))
            .and_then(|h| h.as_str())
            .ok_or_else(|| anyhow!("{}: no config hash recorded", path.display()))?;
        if recorded != hash {
            bail_runtime(format!("{}: produced by config {recorded}, not {hash}", path.display()))?;
        }
        checks.push(serde_json::json!({ "report": path }));
    }
    print_json(&checks)?;
    Ok(())
}

fn bail_runtime(msg: impl std::fmt::Display) -> CmdResult {
    Err(Failure::Runtime(anyhow!("verification failed: {msg}")))
}
