//! Run configuration: one TOML file covering data, model, training,
//! decoding and evaluation.
//!
//! Every artifact records the SHA-256 of the canonical serialization of the
//! configuration that produced it, taken after command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{ActionScore, ConfidenceKind, DecodeConfig, FocusMode, Selection, Strategy};
use crate::diffusion::LossWeighting;
use crate::env::{N_TASKS, OBS_DIM, PROMPT_LEN};
use crate::error::{Error, Result};
use crate::eval::{ChunkExecution, RolloutConfig};
use crate::predictor::{AdamWConfig, HeadKind, PredictorConfig, TrainConfig};
use crate::rng;
use crate::vocab::{VocabLayout, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub env: EnvSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub base_vocab: u32,
    pub action_vocab: u32,
    /// Percent trimmed from each tail when fitting bin ranges.
    pub clip_percentile: f64,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Observation positions prepended to the prompt.
    pub obs_tokens: usize,
    pub head: HeadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub loss: LossWeighting,
    pub t_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub final_lr_fraction: f64,
    /// Optimizer steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub strategy: Strategy,
    pub iters_per_action: usize,
    pub selection: Selection,
    pub temperature: f64,
    pub focus_mode: FocusMode,
    pub confidence: ConfidenceKind,
    pub action_score: ActionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub n_episodes: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_trials: usize,
    pub chain_trials: usize,
    pub chunk_execution: ChunkExecution,
    pub m: usize,
    pub horizon: usize,
    /// Record wall-clock decode times (makes reports run-dependent).
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsSection {
                dataset: "data/demos.jsonl".into(),
                checkpoint: "runs/model.ckpt".into(),
                report_dir: "runs/reports".into(),
            },
            tokenizer: TokenizerSection {
                base_vocab: 512,
                action_vocab: 32,
                clip_percentile: 1.0,
                chunk_size: 5,
            },
            model: ModelSection {
                embed_dim: 64,
                layers: 2,
                heads: 4,
                mlp_ratio: 4,
                obs_tokens: 8,
                head: HeadKind::Localized,
            },
            diffusion: DiffusionSection {
                steps: 10,
                loss: LossWeighting::Mean,
                t_min: 0.05,
            },
            train: TrainSection {
                epochs: 12,
                batch_size: 32,
                lr: 1e-3,
                weight_decay: 0.01,
                grad_clip: 1.0,
                warmup_steps: 100,
                final_lr_fraction: 0.1,
                checkpoint_every: 0,
                max_steps: 0,
            },
            decode: DecodeSection {
                strategy: Strategy::Hierarchical,
                iters_per_action: 2,
                selection: Selection::Greedy,
                temperature: 1.0,
                focus_mode: FocusMode::Consecutive,
                confidence: ConfidenceKind::Probability,
                action_score: ActionScore::MaskedOnly,
            },
            env: EnvSection {
                n_episodes: 2000,
                horizon: 60,
            },
            eval: EvalSection {
                n_trials: 200,
                chain_trials: 200,
                chunk_execution: ChunkExecution::Full,
                m: 5,
                horizon: 60,
                timing: false,
            },
        }
    }
}

/// Named presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Default,
    /// Tiny model and dataset for smoke runs.
    Micro,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "micro" => Ok(Profile::Micro),
            other => Err(Error::config(format!("unknown profile {other:?} (expected default or micro)"))),
        }
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let mut c = Self::default();
        if p == Profile::Micro {
            c.model = ModelSection {
                embed_dim: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                obs_tokens: 2,
                head: HeadKind::Localized,
            };
            c.env.n_episodes = 64;
            c.train.epochs = 1;
            c.train.batch_size = 32;
            c.train.warmup_steps = 10;
            c.eval.n_trials = 20;
            c.eval.chain_trials = 20;
        }
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Canonical TOML text: fixed key order, every field present.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Hash of the fields that determine a trained checkpoint.
    pub fn training_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            tokenizer: &'a TokenizerSection,
            model: &'a ModelSection,
            diffusion: (&'a LossWeighting, f64),
            train: &'a TrainSection,
            env: &'a EnvSection,
        }
        let key = Key {
            seed: self.seed,
            tokenizer: &self.tokenizer,
            model: &self.model,
            diffusion: (&self.diffusion.loss, self.diffusion.t_min),
            train: &self.train,
            env: &self.env,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("key serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        if t.action_vocab == 0 || t.base_vocab as usize <= crate::env::WORDS.len() || t.chunk_size == 0 {
            return Err(Error::config("tokenizer sizes must be positive and base_vocab must hold the instruction words"));
        }
        if !(0.0..50.0).contains(&t.clip_percentile) {
            return Err(Error::config("clip_percentile must lie in [0, 50)"));
        }
        if self.env.n_episodes == 0 || self.env.horizon == 0 {
            return Err(Error::config("env.n_episodes and env.horizon must be positive"));
        }
        if self.eval.n_trials == 0 || self.eval.horizon == 0 {
            return Err(Error::config("eval.n_trials and eval.horizon must be positive"));
        }
        self.rollout().validate(t.chunk_size)?;
        self.predictor_config()?.validate(&self.layout()?)?;
        self.train_config().validate()?;
        crate::decoder::Decoder::new(self.decode_config(), t.chunk_size, ACTION_DIM)?;
        Ok(())
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.tokenizer.base_vocab, self.tokenizer.action_vocab)
    }

    pub fn seq_len(&self) -> usize {
        PROMPT_LEN + self.tokenizer.chunk_size * ACTION_DIM
    }

    pub fn predictor_config(&self) -> Result<PredictorConfig> {
        let layout = self.layout()?;
        let m = &self.model;
        Ok(PredictorConfig {
            embed_dim: m.embed_dim,
            layers: m.layers,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            max_seq_len: m.obs_tokens + self.seq_len(),
            vocab_in: layout.input_vocab(),
            classes_out: m.head.classes(&layout),
            cond_dim: OBS_DIM,
            obs_tokens: m.obs_tokens,
            prompt_len: PROMPT_LEN,
            n_tasks: N_TASKS,
            head: m.head,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                grad_clip: t.grad_clip,
                ..AdamWConfig::default()
            },
            warmup_steps: t.warmup_steps,
            final_lr_fraction: t.final_lr_fraction,
            t_min: self.diffusion.t_min,
            loss: self.diffusion.loss,
            checkpoint_every: t.checkpoint_every,
            max_steps: (t.max_steps > 0).then_some(t.max_steps),
            seed: rng::derive_seed(self.seed, "train"),
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let d = &self.decode;
        DecodeConfig {
            total_steps: self.diffusion.steps,
            iters_per_action: d.iters_per_action,
            strategy: d.strategy,
            selection: d.selection,
            temperature: d.temperature,
            seed: rng::derive_seed(self.seed, "decode"),
            focus_mode: d.focus_mode,
            confidence: d.confidence,
            action_score: d.action_score,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            n_trials: self.eval.n_trials,
            chunk_execution: self.eval.chunk_execution,
            m: self.eval.m,
            horizon_limit: self.eval.horizon,
            seed: rng::derive_seed(self.seed, "eval"),
            timing: self.eval.timing,
        }
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "data")
    }

    /// Applies a `section.key=value` override (or `seed=value`), parsing the
    /// value as a TOML literal; bare words are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{key}: not a section")))?;
            if !table.contains_key(*part) {
                return Err(Error::config(format!("unknown config key {key:?}")));
            }
            let next = table.get_mut(*part).expect("present");
            if i + 1 == parts.len() {
                *next = value.clone();
                break;
            }
            slot = next;
        }
        let updated: Self = doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_hashes_stably() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        RunConfig::profile(Profile::Micro).validate().unwrap();
    }

    #[test]
    fn overrides_fold_into_hash() {
        let mut c = RunConfig::default();
        let h0 = c.hash();
        c.apply_override("train.epochs=1").unwrap();
        assert_eq!(c.train.epochs, 1);
        assert_ne!(c.hash(), h0);
        c.apply_override("decode.strategy=vanilla").unwrap();
        assert_eq!(c.decode.strategy, Strategy::Vanilla);
        c.apply_override("seed=9").unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.apply_override("train.nope=1").is_err());
        assert!(c.apply_override("train.epochs=\"x\"").is_err());
        assert!(c.apply_override("noequals").is_err());
    }

    #[test]
    fn rejects_inconsistent_budget() {
        let mut c = RunConfig::default();
        assert!(c.apply_override("diffusion.steps=7").is_err());
        c.decode.strategy = Strategy::Vanilla;
        c.diffusion.steps = 7;
        c.validate().unwrap();
        let text = c.canonical().replace("[env]", "[env]\nbogus = 1");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn training_hash_ignores_eval_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.n_trials = 500;
        b.decode.strategy = Strategy::Vanilla;
        assert_eq!(a.training_hash(), b.training_hash());
        b.model.head = HeadKind::FullVocab;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
