//! Masked-token training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, BatchInput, Model};
use crate::dataset::EpisodeRecord;
use crate::diffusion::{forward_mask, masked_loss_with_grad, LossWeighting, TokenSequence};
use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Scalar;
use crate::vocab::{tokenize_action, ActionVector, BinSpec, TokenId, VocabLayout, ACTION_DIM, IGNORE_LABEL};

/// One training example: the state at an episode step and the next `K`
/// actions as tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prompt: Vec<TokenId>,
    pub obs: Vec<f64>,
    pub task_id: usize,
    pub answer: Vec<TokenId>,
}

/// One sample per episode step. Chunks running past the end of an episode
/// are padded with a hold action (no motion, last gripper command).
pub fn build_samples(episodes: &[EpisodeRecord], bins: &BinSpec, layout: &VocabLayout, chunk_size: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for ep in episodes {
        let Some(last) = ep.actions.last() else { continue };
        let hold = ActionVector {
            dpos: [0.0; 3],
            drot: [0.0; 3],
            gripper: last[ACTION_DIM - 1],
        };
        let prompt = TaskSpec::from_id(ep.task_id, 0).prompt_tokens().to_vec();
        for step in 0..ep.len() {
            let mut answer = Vec::with_capacity(chunk_size * ACTION_DIM);
            for k in 0..chunk_size {
                let a = ep.actions.get(step + k).map_or(hold, |a| ActionVector::from_array(*a));
                answer.extend_from_slice(&tokenize_action(&a, bins, layout));
            }
            out.push(Sample {
                prompt: prompt.clone(),
                obs: ep.obs[step].clone(),
                task_id: ep.task_id,
                answer,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Linear warmup length; afterwards the rate follows a cosine down to
    /// `final_lr_fraction * lr`.
    pub warmup_steps: u64,
    pub final_lr_fraction: f64,
    pub t_min: f64,
    pub loss: LossWeighting,
    /// Checkpoint interval in optimizer steps; 0 writes only the final state.
    pub checkpoint_every: u64,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            warmup_steps: 100,
            final_lr_fraction: 0.1,
            t_min: 0.05,
            loss: LossWeighting::InverseTime,
            checkpoint_every: 0,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min <= 1.0) {
            return Err(Error::config(format!("t_min {} must lie in (0, 1]", self.t_min)));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_samples: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(n_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let lr = self.optimizer.lr;
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// A masked batch ready for the model: inputs, per-row labels and the
/// diffusion time drawn for each element.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub input: BatchInput,
    pub labels: Vec<i64>,
    pub times: Vec<f64>,
}

/// Masks each element at `t ~ U[t_min, 1]`, redrawing `t` when no answer
/// token ended up masked.
pub fn prepare_batch<R: Rng + ?Sized>(
    samples: &[&Sample],
    layout: &VocabLayout,
    model_head: super::HeadKind,
    t_min: f64,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let seq_len = first.prompt.len() + first.answer.len();
    let mut input = BatchInput {
        ids: Vec::with_capacity(samples.len() * seq_len),
        obs: Vec::new(),
        tasks: Vec::new(),
        batch: samples.len(),
        seq_len,
    };
    let mut labels = Vec::with_capacity(samples.len() * seq_len);
    let mut times = Vec::with_capacity(samples.len());
    for s in samples {
        let mut ids = s.prompt.clone();
        ids.extend_from_slice(&s.answer);
        if ids.len() != seq_len {
            return Err(Error::shape("samples in a batch must share one sequence length"));
        }
        let x0 = TokenSequence::new(ids, s.prompt.len())?;
        let (t, xt) = loop {
            let t = t_min + (1.0 - t_min) * rng.gen::<f64>();
            let xt = forward_mask(&x0, t, layout, rng)?;
            if xt.masked_count(layout) > 0 {
                break (t, xt);
            }
        };
        for (i, (&noisy, &clean)) in xt.ids.iter().zip(&x0.ids).enumerate() {
            let masked = i >= s.prompt.len() && noisy == layout.mask_token_id;
            labels.push(if masked { model_head.label(clean, layout) } else { IGNORE_LABEL });
        }
        input.ids.extend_from_slice(&xt.ids);
        input.obs.extend_from_slice(&s.obs);
        input.tasks.push(s.task_id);
        times.push(t);
    }
    Ok(PreparedBatch { input, labels, times })
}

/// Mean per-element masked loss of a prepared batch, with gradients when
/// `want_grads`.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &PreparedBatch,
    weighting: LossWeighting,
    want_grads: bool,
) -> Result<(f64, Option<Vec<T>>)> {
    let (logits, cache) = model.forward(&batch.input)?;
    let classes = model.config.classes_out;
    let n = batch.input.seq_len;
    let b = batch.input.batch;
    let scale = 1.0 / b as f64;
    let mut dlogits = if want_grads { vec![T::zero(); logits.len()] } else { Vec::new() };
    let mut total = 0.0;
    for e in 0..b {
        let rows = e * n * classes..(e + 1) * n * classes;
        let labels = &batch.labels[e * n..(e + 1) * n];
        let grad = want_grads.then(|| (&mut dlogits[rows.clone()], scale));
        total += masked_loss_with_grad(&logits[rows], classes, labels, batch.times[e], weighting, grad)?;
    }
    let grads = want_grads.then(|| model.backward(&batch.input, &cache, &dlogits));
    Ok((total * scale, grads))
}

/// Masks a batch with `rng` and returns the loss and exact gradients.
pub fn loss_and_grads<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    samples: &[&Sample],
    layout: &VocabLayout,
    t_min: f64,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<(f64, Vec<T>)> {
    let batch = prepare_batch(samples, layout, model.config.head, t_min, rng)?;
    let (loss, grads) = batch_loss(model, &batch, weighting, true)?;
    Ok((loss, grads.expect("requested gradients")))
}

/// Mean masked loss over `samples` with masks drawn from a fixed stream.
pub fn evaluation_loss(model: &Model<f32>, samples: &[Sample], layout: &VocabLayout, cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, chunk) in samples.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut r = rng::stream(cfg.seed, "train.eval_mask", i as u64);
        let batch = prepare_batch(&refs, layout, model.config.head, cfg.t_min, &mut r)?;
        let (loss, _) = batch_loss(model, &batch, cfg.loss, false)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCurvePoint {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub step: u64,
    pub curve: Vec<LossCurvePoint>,
}

impl TrainState {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(cfg.optimizer, &model.layout);
        Self {
            model,
            optimizer,
            step: 0,
            curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub eval_loss: Option<f64>,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "train.shuffle", epoch));
    order
}

/// Runs (or resumes) training up to the configured step count.
///
/// The batch at global step `s` depends only on `(seed, s)`, so resuming
/// from a saved state reproduces an uninterrupted run exactly.
/// `on_checkpoint` is called every `checkpoint_every` steps and once at the end.
pub fn train(
    mut state: TrainState,
    samples: &[Sample],
    holdout: &[Sample],
    layout: &VocabLayout,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_epoch = cfg.steps_per_epoch(samples.len());
    let total = cfg.total_steps(samples.len());
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < total {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, samples.len());
            order_epoch = epoch;
        }
        let start = ((step % per_epoch) as usize) * cfg.batch_size;
        let end = (start + cfg.batch_size).min(samples.len());
        let batch: Vec<&Sample> = order[start..end].iter().map(|&i| &samples[i]).collect();

        let mut r = rng::stream(cfg.seed, "train.mask", step);
        let (loss, mut grads) = loss_and_grads(&state.model, &batch, layout, cfg.t_min, cfg.loss, &mut r)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let grad_norm = state.optimizer.clip(&mut grads);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("gradient norm is {grad_norm}"),
            });
        }
        let lr = cfg.lr_at(step, total);
        state.optimizer.step(&mut state.model.params, &grads, lr);
        if !state.model.all_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        state.step += 1;
        state.curve.push(LossCurvePoint {
            step,
            epoch,
            loss,
            lr,
            grad_norm,
        });
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
            on_checkpoint(&state)?;
        }
    }
    on_checkpoint(&state)?;
    let eval_loss = if holdout.is_empty() {
        None
    } else {
        Some(evaluation_loss(&state.model, holdout, layout, cfg)?)
    };
    Ok(TrainOutcome { state, eval_loss })
}

/// Loss curve as CSV text.
pub fn curve_csv(curve: &[LossCurvePoint]) -> String {
    let mut s = String::from("step,epoch,loss,lr,grad_norm\n");
    for p in curve {
        s.push_str(&format!("{},{},{},{},{}\n", p.step, p.epoch, p.loss, p.lr, p.grad_norm));
    }
    s
}
