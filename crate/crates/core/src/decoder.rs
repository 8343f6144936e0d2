//! Reverse-process samplers over action chunks.
//!
//! Both decoders start from a fully masked answer region and, at every step,
//! predict all masked positions and keep only some of the predictions:
//!
//! * vanilla keeps the most confident predictions until the cumulative
//!   number of revealed positions follows the linear schedule;
//! * hierarchical picks one focus action by summed confidence, reveals its
//!   most confident tokens and remasks everything else that is not finalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, TokenSequence};
use crate::error::{Error, Result};
use crate::predictor::{BatchInput, Conditioning, HeadKind, Model};
use crate::vocab::{TokenChunk, TokenId, VocabLayout};

/// Anything that scores every class at every answer position.
pub trait MaskPredictor {
    fn head(&self) -> HeadKind;

    /// Logits for the answer positions of `seq`, row-major
    /// `answer_len x head.classes(layout)`.
    fn answer_logits(&self, seq: &TokenSequence, cond: &Conditioning) -> Result<Vec<f64>>;
}

impl MaskPredictor for Model<f32> {
    fn head(&self) -> HeadKind {
        self.config.head
    }

    fn answer_logits(&self, seq: &TokenSequence, cond: &Conditioning) -> Result<Vec<f64>> {
        if seq.prompt_len != self.config.prompt_len {
            return Err(Error::shape(format!(
                "prompt of {} tokens for a model expecting {}",
                seq.prompt_len, self.config.prompt_len
            )));
        }
        let input = BatchInput {
            ids: seq.ids.clone(),
            obs: cond.observation.clone(),
            tasks: vec![cond.task_id],
            batch: 1,
            seq_len: seq.len(),
        };
        let logits = self.logits(&input)?;
        let c = self.config.classes_out;
        Ok(logits[seq.prompt_len * c..].iter().map(|&x| f64::from(x)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    #[default]
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusMode {
    /// Keep the focus action until its visits are used up.
    #[default]
    Consecutive,
    /// Re-select the focus action at every step.
    ReArgmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    /// Softmax probability of the proposed class.
    #[default]
    Probability,
    /// Raw logit of the proposed class.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionScore {
    /// Sum over the action's still-masked positions.
    #[default]
    MaskedOnly,
    /// Sum over all positions of the action, revealed ones counting as 1.
    AllTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub total_steps: usize,
    pub iters_per_action: usize,
    pub strategy: Strategy,
    pub selection: Selection,
    pub temperature: f64,
    pub seed: u64,
    pub focus_mode: FocusMode,
    pub confidence: ConfidenceKind,
    pub action_score: ActionScore,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            total_steps: 10,
            iters_per_action: 2,
            strategy: Strategy::Hierarchical,
            selection: Selection::Greedy,
            temperature: 1.0,
            seed: 0,
            focus_mode: FocusMode::Consecutive,
            confidence: ConfidenceKind::Probability,
            action_score: ActionScore::MaskedOnly,
        }
    }
}

/// Token confidences for a `K x D` chunk and the per-action scores derived
/// from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMatrix {
    pub horizon: usize,
    pub action_dim: usize,
    pub values: Vec<f64>,
    pub action_scores: Vec<f64>,
    pub finalized: Vec<bool>,
}

impl ConfidenceMatrix {
    /// Scores are sums of `values` per action; in [`ActionScore::MaskedOnly`]
    /// mode only positions flagged in `masked` contribute.
    pub fn new(values: Vec<f64>, horizon: usize, action_dim: usize, masked: &[bool], mode: ActionScore) -> Self {
        let mut m = Self {
            horizon,
            action_dim,
            values,
            action_scores: vec![0.0; horizon],
            finalized: vec![false; horizon],
        };
        m.rescore(masked, mode);
        m
    }

    pub fn rescore(&mut self, masked: &[bool], mode: ActionScore) {
        let d = self.action_dim;
        for i in 0..self.horizon {
            let terms: Vec<f64> = (i * d..(i + 1) * d)
                .filter(|&p| mode == ActionScore::AllTokens || masked[p])
                .map(|p| self.values[p])
                .collect();
            self.action_scores[i] = sorted_sum(terms);
        }
    }

    pub fn get(&self, action: usize, dim: usize) -> f64 {
        self.values[action * self.action_dim + dim]
    }
}

/// Proposals for every answer position (current token where unmasked).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<TokenId>,
    pub confidence: Vec<f64>,
}

/// Index of the largest value, lowest index on ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Sum in ascending order, so permutations of the same values tie exactly.
fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let s = sorted_sum(e.clone());
    e.into_iter().map(|x| x / s).collect()
}

/// Predicts every masked answer position of `seq`.
///
/// Masked positions get the argmax class (greedy) or a temperature sample,
/// with confidence equal to its softmax probability (or raw logit).
/// Unmasked positions keep their token with confidence 1.
pub fn predict_with_confidence<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
    seq: &TokenSequence,
    cond: &Conditioning,
    model: &M,
    layout: &VocabLayout,
    config: &DecodeConfig,
    rng: &mut R,
) -> Result<Prediction> {
    let head = model.head();
    let classes = head.classes(layout);
    let answer = seq.answer();
    let logits = model.answer_logits(seq, cond)?;
    if logits.len() != answer.len() * classes {
        return Err(Error::shape(format!(
            "predictor returned {} logits for {} positions x {classes} classes",
            logits.len(),
            answer.len()
        )));
    }
    let mut tokens = answer.to_vec();
    let mut confidence = vec![1.0; answer.len()];
    for (i, &id) in answer.iter().enumerate() {
        if id != layout.mask_token_id {
            continue;
        }
        let row = &logits[i * classes..(i + 1) * classes];
        let probs = softmax(row);
        let class = match config.selection {
            Selection::Greedy => argmax(row),
            Selection::Sample => {
                let scaled: Vec<f64> = row.iter().map(|&x| x / config.temperature).collect();
                let p = softmax(&scaled);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = classes - 1;
                for (c, &pc) in p.iter().enumerate() {
                    acc += pc;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                pick
            }
        };
        tokens[i] = head.token(class, layout)?;
        confidence[i] = match config.confidence {
            ConfidenceKind::Probability => probs[class],
            ConfidenceKind::Logit => row[class],
        };
    }
    Ok(Prediction { tokens, confidence })
}

/// What happened at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub focus: Option<usize>,
    /// Answer positions revealed at this step.
    pub revealed: Vec<usize>,
    /// Answer positions that were predicted (or previously revealed) and are
    /// masked again after this step.
    pub remasked: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Answer tokens after the step.
    pub tokens: Vec<TokenId>,
    pub masked_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    /// One JSON object per step, each tagged with the producing config hash
    /// and seed.
    pub fn to_jsonl(&self, config_hash: &str, seed: u64) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            let mut v = serde_json::to_value(s)?;
            v["config_hash"] = config_hash.into();
            v["seed"] = seed.into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Final answer tokens, action-major.
    pub tokens: Vec<TokenId>,
    pub horizon: usize,
    pub trace: DecodeTrace,
}

impl Decoded {
    /// The answer as a chunk of 7-dimensional actions.
    pub fn chunk(&self) -> Result<TokenChunk> {
        TokenChunk::from_flat(self.tokens.clone(), self.horizon)
    }
}

/// A validated decoder for chunks of `horizon` actions of `action_dim` tokens.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecodeConfig,
    horizon: usize,
    action_dim: usize,
    schedule: DiffusionSchedule,
}

impl Decoder {
    pub fn new(config: DecodeConfig, horizon: usize, action_dim: usize) -> Result<Self> {
        if horizon == 0 || action_dim == 0 {
            return Err(Error::config("chunk must contain at least one token"));
        }
        if config.strategy == Strategy::Hierarchical {
            if config.iters_per_action == 0 {
                return Err(Error::config("iters_per_action must be positive"));
            }
            if config.total_steps != horizon * config.iters_per_action {
                return Err(Error::config(format!(
                    "hierarchical decoding needs total_steps = K * iters_per_action = {} * {} = {}, got {}",
                    horizon,
                    config.iters_per_action,
                    horizon * config.iters_per_action,
                    config.total_steps
                )));
            }
        }
        if config.selection == Selection::Sample && !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(Error::config(format!("temperature {} must be positive", config.temperature)));
        }
        let schedule = DiffusionSchedule::linear(config.total_steps)?;
        Ok(Self {
            config,
            horizon,
            action_dim,
            schedule,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn answer_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn decode<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        prompt: &[TokenId],
        cond: &Conditioning,
        layout: &VocabLayout,
        rng: &mut R,
    ) -> Result<Decoded> {
        let seq = TokenSequence::fully_masked(prompt, self.answer_len(), layout);
        let (seq, trace) = match self.config.strategy {
            Strategy::Vanilla => self.vanilla(model, seq, cond, layout, rng)?,
            Strategy::Hierarchical => self.hierarchical(model, seq, cond, layout, rng)?,
        };
        Ok(Decoded {
            tokens: seq.answer().to_vec(),
            horizon: self.horizon,
            trace,
        })
    }

    fn vanilla<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        mut seq: TokenSequence,
        cond: &Conditioning,
        layout: &VocabLayout,
        rng: &mut R,
    ) -> Result<(TokenSequence, DecodeTrace)> {
        let len = self.answer_len();
        let mask = layout.mask_token_id;
        let mut trace = DecodeTrace::default();
        let mut revealed_total = 0;
        for k in 0..self.config.total_steps {
            let masked: Vec<usize> = (0..len).filter(|&p| seq.answer()[p] == mask).collect();
            let mut step = TraceStep {
                step: k,
                focus: None,
                revealed: Vec::new(),
                remasked: Vec::new(),
                confidence: vec![1.0; len],
                tokens: Vec::new(),
                masked_count: 0,
            };
            if !masked.is_empty() {
                let pred = predict_with_confidence(&seq, cond, model, layout, &self.config, rng)?;
                let quota = self.schedule.cumulative_reveal(k, len) - revealed_total;
                let mut order = masked.clone();
                order.sort_by(|&a, &b| pred.confidence[b].total_cmp(&pred.confidence[a]).then(a.cmp(&b)));
                let (reveal, keep) = order.split_at(quota.min(order.len()));
                for &p in reveal {
                    seq.answer_mut()[p] = pred.tokens[p];
                }
                step.revealed = sorted(reveal);
                step.remasked = sorted(keep);
                step.confidence = pred.confidence;
                revealed_total += reveal.len();
            }
            step.tokens = seq.answer().to_vec();
            step.masked_count = seq.masked_count(layout);
            trace.steps.push(step);
        }
        Ok((seq, trace))
    }

    fn hierarchical<M: MaskPredictor + ?Sized, R: Rng + ?Sized>(
        &self,
        model: &M,
        mut seq: TokenSequence,
        cond: &Conditioning,
        layout: &VocabLayout,
        rng: &mut R,
    ) -> Result<(TokenSequence, DecodeTrace)> {
        let (k_actions, d) = (self.horizon, self.action_dim);
        let len = self.answer_len();
        let ipa = self.config.iters_per_action;
        let mask = layout.mask_token_id;
        let mut finalized = vec![false; k_actions];
        let mut visits = vec![0usize; k_actions];
        let mut focus: Option<usize> = None;
        let mut trace = DecodeTrace::default();

        for k in 0..self.config.total_steps {
            let is_masked: Vec<bool> = seq.answer().iter().map(|&id| id == mask).collect();
            let mut step = TraceStep {
                step: k,
                focus: None,
                revealed: Vec::new(),
                remasked: Vec::new(),
                confidence: vec![1.0; len],
                tokens: Vec::new(),
                masked_count: 0,
            };
            if is_masked.iter().any(|&m| m) {
                let pred = predict_with_confidence(&seq, cond, model, layout, &self.config, rng)?;
                let mut conf = ConfidenceMatrix::new(pred.confidence.clone(), k_actions, d, &is_masked, self.config.action_score);
                conf.finalized.clone_from(&finalized);

                let keep_focus = self.config.focus_mode == FocusMode::Consecutive && focus.is_some_and(|f| !finalized[f]);
                let f = if keep_focus {
                    focus.expect("checked")
                } else {
                    let mut best: Option<usize> = None;
                    for i in (0..k_actions).filter(|&i| !finalized[i]) {
                        if best.is_none_or(|b| conf.action_scores[i] > conf.action_scores[b]) {
                            best = Some(i);
                        }
                    }
                    best.ok_or_else(|| Error::config("no action left to decode"))?
                };
                focus = Some(f);

                // Token-level: reveal the top-q still-masked tokens of the focus action.
                let mut cand: Vec<usize> = (f * d..(f + 1) * d).filter(|&p| is_masked[p]).collect();
                cand.sort_by(|&a, &b| pred.confidence[b].total_cmp(&pred.confidence[a]).then(a.cmp(&b)));
                let remaining = ipa - visits[f];
                let q = cand.len().div_ceil(remaining);
                let (reveal, keep) = cand.split_at(q);
                for &p in reveal {
                    seq.answer_mut()[p] = pred.tokens[p];
                }
                let mut remasked: Vec<usize> = keep.to_vec();

                // Action-level: every other unfinished action goes back to fully
                // masked. Its visit count is kept, so later visits reveal more.
                for i in (0..k_actions).filter(|&i| i != f && !finalized[i]) {
                    for p in i * d..(i + 1) * d {
                        seq.answer_mut()[p] = mask;
                        remasked.push(p);
                    }
                }

                visits[f] += 1;
                if visits[f] == ipa {
                    finalized[f] = true;
                }
                step.focus = Some(f);
                step.revealed = sorted(reveal);
                step.remasked = sorted(&remasked);
                step.confidence = pred.confidence;
            }
            step.tokens = seq.answer().to_vec();
            step.masked_count = seq.masked_count(layout);
            trace.steps.push(step);
        }
        Ok((seq, trace))
    }
}

fn sorted(xs: &[usize]) -> Vec<usize> {
    let mut v = xs.to_vec();
    v.sort_unstable();
    v
}
