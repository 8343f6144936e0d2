//! The mask predictor: a small bidirectional transformer over
//! `[prompt | answer]` token sequences with a classification head.
//!
//! With [`HeadKind::Localized`] the head has one output per action token, so
//! any argmax maps back into the action block. [`HeadKind::FullVocab`] scores
//! every base and action token and exists as the ablation baseline.

mod checkpoint;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{BatchInput, ForwardCache, Model};
pub use optim::{AdamW, AdamWConfig};
pub use train::{
    batch_loss, build_samples, curve_csv, evaluation_loss, loss_and_grads, prepare_batch, train, LossCurvePoint,
    PreparedBatch, Sample, TrainConfig, TrainOutcome, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, VocabLayout, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Scores only the `V_a` action tokens.
    #[default]
    Localized,
    /// Scores the whole `V + V_a` vocabulary.
    FullVocab,
}

impl HeadKind {
    pub fn classes(self, layout: &VocabLayout) -> usize {
        match self {
            HeadKind::Localized => layout.action_vocab_size as usize,
            HeadKind::FullVocab => (layout.base_vocab_size + layout.action_vocab_size) as usize,
        }
    }

    /// Training label of a clean token at a masked position.
    pub fn label(self, id: TokenId, layout: &VocabLayout) -> i64 {
        match self {
            HeadKind::Localized => layout.map_local(id),
            HeadKind::FullVocab if id < layout.base_vocab_size + layout.action_vocab_size => i64::from(id),
            HeadKind::FullVocab => IGNORE_LABEL,
        }
    }

    /// Token id emitted for head class `class`.
    pub fn token(self, class: usize, layout: &VocabLayout) -> Result<TokenId> {
        match self {
            HeadKind::Localized => layout.unmap_local(class),
            HeadKind::FullVocab if class < self.classes(layout) => Ok(class as TokenId),
            HeadKind::FullVocab => Err(Error::ClassOutOfRange {
                class,
                classes: self.classes(layout),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub vocab_in: usize,
    pub classes_out: usize,
    /// Width of the observation vector.
    pub cond_dim: usize,
    /// Prefix positions ahead of the prompt, each a learned linear
    /// projection of the whole observation.
    pub obs_tokens: usize,
    pub prompt_len: usize,
    pub n_tasks: usize,
    pub head: HeadKind,
}

impl PredictorConfig {
    pub fn validate(&self, layout: &VocabLayout) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("need at least one layer and a positive mlp ratio"));
        }
        if self.vocab_in != layout.input_vocab() {
            return Err(Error::config(format!(
                "vocab_in {} does not match layout ({})",
                self.vocab_in,
                layout.input_vocab()
            )));
        }
        if self.classes_out != self.head.classes(layout) {
            return Err(Error::config(format!(
                "classes_out {} does not match {:?} head ({})",
                self.classes_out,
                self.head,
                self.head.classes(layout)
            )));
        }
        if self.cond_dim == 0 || self.obs_tokens == 0 {
            return Err(Error::config("need a non-empty observation and at least one observation position"));
        }
        if self.obs_tokens + self.prompt_len > self.max_seq_len || self.n_tasks == 0 {
            return Err(Error::config("prompt must fit in max_seq_len and there must be tasks"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Observation vector and task id conditioning one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub observation: Vec<f64>,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Flat parameter buffer layout in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>, decay: bool) -> usize {
        let info = TensorInfo {
            name,
            offset: self.total,
            decay,
            shape,
        };
        self.total += info.numel();
        self.tensors.push(info);
        self.tensors.len() - 1
    }

    pub fn range(&self, idx: usize) -> std::ops::Range<usize> {
        self.tensors[idx].range()
    }

    pub fn by_name(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIdx {
    pub tok: usize,
    pub pos: usize,
    pub task: usize,
    pub obs_w: usize,
    pub obs_b: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

pub(crate) fn build_layout(cfg: &PredictorConfig) -> (ParamLayout, ParamIdx) {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_ratio * d;
    let mut l = ParamLayout {
        tensors: Vec::new(),
        total: 0,
    };
    let tok = l.push("tok_emb".into(), vec![cfg.vocab_in, d], false);
    let pos = l.push("pos_emb".into(), vec![cfg.max_seq_len, d], false);
    let task = l.push("task_emb".into(), vec![cfg.n_tasks, d], false);
    let obs_w = l.push("obs_proj.w".into(), vec![cfg.cond_dim, cfg.obs_tokens * d], true);
    let obs_b = l.push("obs_proj.b".into(), vec![cfg.obs_tokens * d], false);
    let layers = (0..cfg.layers)
        .map(|i| {
            let mut p = |n: &str, shape: Vec<usize>, decay: bool| l.push(format!("layer{i}.{n}"), shape, decay);
            LayerIdx {
                ln1_g: p("ln1.g", vec![d], false),
                ln1_b: p("ln1.b", vec![d], false),
                qkv_w: p("attn.qkv.w", vec![d, 3 * d], true),
                qkv_b: p("attn.qkv.b", vec![3 * d], false),
                out_w: p("attn.out.w", vec![d, d], true),
                out_b: p("attn.out.b", vec![d], false),
                ln2_g: p("ln2.g", vec![d], false),
                ln2_b: p("ln2.b", vec![d], false),
                fc1_w: p("mlp.fc1.w", vec![d, hidden], true),
                fc1_b: p("mlp.fc1.b", vec![hidden], false),
                fc2_w: p("mlp.fc2.w", vec![hidden, d], true),
                fc2_b: p("mlp.fc2.b", vec![d], false),
            }
        })
        .collect();
    let lnf_g = l.push("ln_f.g".into(), vec![d], false);
    let lnf_b = l.push("ln_f.b".into(), vec![d], false);
    let head_w = l.push("head.w".into(), vec![d, cfg.classes_out], true);
    let head_b = l.push("head.b".into(), vec![cfg.classes_out], false);
    (
        l,
        ParamIdx {
            tok,
            pos,
            task,
            obs_w,
            obs_b,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_kind_mapping() {
        let l = VocabLayout::new(512, 32).unwrap();
        assert_eq!(HeadKind::Localized.classes(&l), 32);
        assert_eq!(HeadKind::FullVocab.classes(&l), 544);
        assert_eq!(HeadKind::Localized.label(513, &l), 1);
        assert_eq!(HeadKind::Localized.label(7, &l), IGNORE_LABEL);
        assert_eq!(HeadKind::FullVocab.label(513, &l), 513);
        assert_eq!(HeadKind::FullVocab.label(l.mask_token_id, &l), IGNORE_LABEL);
        for c in 0..32 {
            assert!(l.is_action_token(HeadKind::Localized.token(c, &l).unwrap()));
        }
        assert_eq!(HeadKind::FullVocab.token(7, &l).unwrap(), 7);
    }
}
