//! Masked diffusion over token sequences.
//!
//! The forward process hides each answer token independently with probability
//! `t`. The reverse step from `t` to `s < t` keeps unmasked tokens, keeps a
//! masked position masked with probability `s / t`, and otherwise draws a token
//! from the mask predictor, scaled by `(t - s) / t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Scalar};
use crate::vocab::{TokenId, VocabLayout, IGNORE_LABEL};

/// Conditioning prompt followed by an answer region of action tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > ids.len() {
            return Err(Error::shape(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        Ok(Self { ids, prompt_len })
    }

    /// A prompt followed by `answer_len` mask tokens.
    pub fn fully_masked(prompt: &[TokenId], answer_len: usize, layout: &VocabLayout) -> Self {
        let mut ids = prompt.to_vec();
        ids.resize(prompt.len() + answer_len, layout.mask_token_id);
        Self {
            ids,
            prompt_len: prompt.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.ids[..self.prompt_len]
    }

    pub fn answer(&self) -> &[TokenId] {
        &self.ids[self.prompt_len..]
    }

    pub fn answer_mut(&mut self) -> &mut [TokenId] {
        &mut self.ids[self.prompt_len..]
    }

    pub fn masked_count(&self, layout: &VocabLayout) -> usize {
        self.answer().iter().filter(|&&id| id == layout.mask_token_id).count()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidTime(t))
    }
}

/// Hides every answer token independently with probability `t`.
///
/// One uniform draw is taken per answer position, in order, so the result is a
/// function of `(x0, t, rng state)` alone.
pub fn forward_mask<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: f64,
    layout: &VocabLayout,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_time(t)?;
    let mut xt = x0.clone();
    for id in xt.answer_mut() {
        let u: f64 = rng.gen();
        if u < t {
            *id = layout.mask_token_id;
        }
    }
    Ok(xt)
}

/// Distribution of one position after a reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseDist {
    pub stay_masked: f64,
    pub tokens: Vec<(TokenId, f64)>,
}

impl ReverseDist {
    pub fn total(&self) -> f64 {
        self.stay_masked + self.tokens.iter().map(|(_, p)| p).sum::<f64>()
    }
}

/// Per-position reverse transition `q(x_s | x_t)` for every answer position.
///
/// `predictor_probs[i]` is the predictor's distribution over the action classes
/// at answer position `i`; rows at unmasked positions are not read.
pub fn reverse_transition_probs(
    x_t: &TokenSequence,
    s: f64,
    t: f64,
    predictor_probs: &[Vec<f64>],
    layout: &VocabLayout,
) -> Result<Vec<ReverseDist>> {
    if !(0.0 <= s && s < t && t <= 1.0) {
        return Err(Error::InvalidStep { s, t });
    }
    let answer = x_t.answer();
    if predictor_probs.len() != answer.len() {
        return Err(Error::shape(format!(
            "{} predictor rows for {} answer positions",
            predictor_probs.len(),
            answer.len()
        )));
    }
    let stay = s / t;
    let reveal = (t - s) / t;
    answer
        .iter()
        .zip(predictor_probs)
        .map(|(&id, probs)| {
            if id != layout.mask_token_id {
                return Ok(ReverseDist {
                    stay_masked: 0.0,
                    tokens: vec![(id, 1.0)],
                });
            }
            if probs.len() != layout.action_vocab_size as usize {
                return Err(Error::shape(format!(
                    "predictor row has {} classes, expected {}",
                    probs.len(),
                    layout.action_vocab_size
                )));
            }
            let tokens = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| Ok((layout.unmap_local(c)?, reveal * p)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReverseDist {
                stay_masked: stay,
                tokens,
            })
        })
        .collect()
}

/// Draws `x_s` from the reverse transition.
pub fn sample_reverse_step<R: Rng + ?Sized>(
    x_t: &TokenSequence,
    dists: &[ReverseDist],
    layout: &VocabLayout,
    rng: &mut R,
) -> TokenSequence {
    let mut x_s = x_t.clone();
    for (id, dist) in x_s.answer_mut().iter_mut().zip(dists) {
        let u: f64 = rng.gen::<f64>() * dist.total();
        if u < dist.stay_masked {
            *id = layout.mask_token_id;
            continue;
        }
        let mut acc = dist.stay_masked;
        // Falls back to the last token if rounding leaves u past the sum.
        *id = dist.tokens.last().map(|(tok, _)| *tok).unwrap_or(*id);
        for &(tok, p) in &dist.tokens {
            acc += p;
            if u < acc {
                *id = tok;
                break;
            }
        }
    }
    x_s
}

/// Strictly decreasing reverse-time grid from 1 to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    times: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule `t_k = 1 - k / steps`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::EmptySchedule);
        }
        let times = (0..=steps)
            .map(|k| if k == steps { 0.0 } else { 1.0 - k as f64 / steps as f64 })
            .collect();
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `(t_k, t_{k+1})` for reverse step `k`.
    pub fn step_times(&self, k: usize) -> (f64, f64) {
        (self.times[k], self.times[k + 1])
    }

    /// Answer positions revealed after step `k` of a linear schedule, out of
    /// `total`: `round(total * (k + 1) / steps)` in exact integer arithmetic.
    pub fn cumulative_reveal(&self, k: usize, total: usize) -> usize {
        let steps = self.steps();
        (2 * total * (k + 1) + steps) / (2 * steps)
    }
}

/// Loss normalization over the masked set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Mean cross-entropy over masked positions, scaled by `1 / t`.
    #[default]
    InverseTime,
    /// Plain mean cross-entropy over masked positions.
    Mean,
}

impl LossWeighting {
    pub fn factor(self, t: f64) -> f64 {
        match self {
            LossWeighting::InverseTime => 1.0 / t,
            LossWeighting::Mean => 1.0,
        }
    }
}

/// Masked cross-entropy of one sequence.
///
/// `logits` is `labels.len() x classes` row-major; positions labelled
/// [`IGNORE_LABEL`] do not contribute.
pub fn masked_loss(logits: &[f64], classes: usize, labels: &[i64], t: f64, weighting: LossWeighting) -> Result<f64> {
    masked_loss_with_grad(logits, classes, labels, t, weighting, None)
}

/// As [`masked_loss`], optionally accumulating `scale * dloss/dlogits` into `grad`.
pub fn masked_loss_with_grad<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[i64],
    t: f64,
    weighting: LossWeighting,
    mut grad: Option<(&mut [T], f64)>,
) -> Result<f64> {
    if logits.len() != labels.len() * classes {
        return Err(Error::shape(format!(
            "{} logits for {} positions x {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidTime(t));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::EmptyMaskSet);
    }
    let weight = weighting.factor(t) / valid as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = usize::try_from(label)
            .ok()
            .filter(|&l| l < classes)
            .ok_or_else(|| Error::shape(format!("label {label} out of range for {classes} classes")))?;
        let row = &logits[i * classes..(i + 1) * classes];
        let lse = log_sum_exp(row);
        total += (lse - row[label]).as_f64();
        if let Some((g, scale)) = grad.as_mut() {
            let w = T::from_f64_lossy(weight * *scale);
            let grow = &mut g[i * classes..(i + 1) * classes];
            for (c, (gx, &x)) in grow.iter_mut().zip(row).enumerate() {
                let p = (x - lse).exp();
                let target = if c == label { T::one() } else { T::zero() };
                *gx += w * (p - target);
            }
        }
    }
    Ok(total * weight)
}
