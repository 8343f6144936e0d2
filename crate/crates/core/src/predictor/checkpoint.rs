//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MDPCKPT\0"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON (CheckpointHeader)
//! params     f32 x header.tensors total, in header order
//! adam_m     f32 x total   (only if header.optimizer_step is set)
//! adam_v     f32 x total   (only if header.optimizer_step is set)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, LossCurvePoint, Model, PredictorConfig, TensorInfo, TrainState};
use crate::error::{Error, Result};
use crate::vocab::{BinSpec, VocabLayout};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance and tokenizer settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Canonical text of the producing run config.
    pub config: String,
    pub config_hash: String,
    /// Hash of the settings that determine the trained weights.
    pub train_hash: String,
    pub seed: u64,
    pub vocab: VocabLayout,
    pub bins: BinSpec,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: String,
    pub config_hash: String,
    pub train_hash: String,
    pub seed: u64,
    pub predictor: PredictorConfig,
    pub vocab: VocabLayout,
    pub bins: BinSpec,
    pub chunk_size: usize,
    pub tensors: Vec<TensorInfo>,
    pub param_count: usize,
    pub step: u64,
    /// Adam step counter; present when moment buffers follow the parameters.
    pub optimizer_step: Option<u64>,
    pub curve: Vec<LossCurvePoint>,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    /// Adam first and second moments.
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, meta: CheckpointMeta, eval_loss: Option<f64>, with_optimizer: bool) -> Self {
        let model = &state.model;
        Self {
            header: CheckpointHeader {
                config: meta.config,
                config_hash: meta.config_hash,
                train_hash: meta.train_hash,
                seed: meta.seed,
                predictor: model.config.clone(),
                vocab: meta.vocab,
                bins: meta.bins,
                chunk_size: meta.chunk_size,
                tensors: model.layout.tensors.clone(),
                param_count: model.layout.total,
                step: state.step,
                optimizer_step: with_optimizer.then_some(state.optimizer.t),
                curve: state.curve.clone(),
                eval_loss,
            },
            params: model.params.clone(),
            moments: with_optimizer.then(|| (state.optimizer.m.clone(), state.optimizer.v.clone())),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.header.predictor.clone(), self.params.clone())
    }

    /// Training state to resume from; requires saved optimizer moments.
    pub fn train_state(&self, optimizer: super::AdamWConfig) -> Result<TrainState> {
        let model = self.model()?;
        let (m, v) = self
            .moments
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        let t = self.header.optimizer_step.unwrap_or(0);
        let optimizer = AdamW::new(optimizer, &model.layout).with_state(m, v, t);
        Ok(TrainState {
            model,
            optimizer,
            step: self.header.step,
            curve: self.header.curve.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let blobs = 1 + if self.moments.is_some() { 2 } else { 0 };
        let mut out = Vec::with_capacity(20 + header.len() + 4 * blobs * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        push(&self.params);
        if let Some((m, v)) = &self.moments {
            push(m);
            push(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let header_bytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        header.vocab.validate()?;
        header.predictor.validate(&header.vocab)?;
        let (layout, _) = super::build_layout(&header.predictor);
        if layout.tensors != header.tensors || layout.total != header.param_count {
            return Err(bad("tensor table does not match the model config"));
        }
        let n = header.param_count;
        let blobs = if header.optimizer_step.is_some() { 3 } else { 1 };
        let data = &body[hlen..];
        if data.len() != 4 * n * blobs {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of tensor data, found {}",
                4 * n * blobs,
                data.len()
            )));
        }
        let read = |i: usize| -> Vec<f32> {
            data[4 * n * i..4 * n * (i + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let params = read(0);
        let moments = (blobs == 3).then(|| (read(1), read(2)));
        Ok(Self { header, params, moments })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
