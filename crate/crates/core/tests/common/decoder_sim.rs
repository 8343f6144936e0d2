//! Reference simulation of both decoders, written from the decoding rules alone.

use std::cell::Cell;

use mdpolicy::decoder::{DecodeConfig, Decoder, MaskPredictor, TraceStep};
use mdpolicy::diffusion::TokenSequence;
use mdpolicy::predictor::{Conditioning, HeadKind};
use mdpolicy::rng;
use mdpolicy::vocab::VocabLayout;
use mdpolicy::Result;
use rand::Rng;

pub const VA: usize = 4;
pub const K: usize = 2;
pub const D: usize = 3;
pub const L: usize = K * D;
pub const IPA: usize = 2;

/// Logits table indexed by model call; returns `table[call]` regardless of input.
pub struct Oracle {
    pub table: Vec<Vec<f64>>,
    pub calls: Cell<usize>,
}

impl MaskPredictor for Oracle {
    fn head(&self) -> HeadKind {
        HeadKind::Localized
    }

    fn answer_logits(&self, _: &TokenSequence, _: &Conditioning) -> Result<Vec<f64>> {
        let i = self.calls.get();
        self.calls.set(i + 1);
        Ok(self.table[i].clone())
    }
}

#[derive(Debug, PartialEq)]
pub struct SimStep {
    pub focus: Option<usize>,
    pub revealed: Vec<usize>,
    pub remasked: Vec<usize>,
    pub tokens: Vec<Option<usize>>,
}

/// Greedy class and its softmax probability at position `p` of `logits`.
fn best(logits: &[f64], p: usize) -> (usize, f64) {
    let row = &logits[p * VA..(p + 1) * VA];
    let mut c = 0;
    for j in 1..VA {
        if row[j] > row[c] {
            c = j;
        }
    }
    (c, 1.0 / ascending_sum(row.iter().map(|x| (x - row[c]).exp()).collect()))
}

fn ascending_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.iter().sum()
}

/// Repeatedly takes the most confident remaining position (lowest index on ties).
fn take_top(cands: &[usize], conf: &[f64], n: usize) -> Vec<usize> {
    let mut left = cands.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        let mut bi = 0;
        for i in 1..left.len() {
            if conf[left[i]] > conf[left[bi]] || (conf[left[i]] == conf[left[bi]] && left[i] < left[bi]) {
                bi = i;
            }
        }
        out.push(left.remove(bi));
    }
    out.sort();
    out
}

pub fn simulate_vanilla(table: &[Vec<f64>], steps: usize) -> Vec<SimStep> {
    let mut tokens: Vec<Option<usize>> = vec![None; L];
    let mut trace = Vec::new();
    for k in 0..steps {
        let masked: Vec<usize> = (0..L).filter(|&p| tokens[p].is_none()).collect();
        let target = (L as f64 * (k + 1) as f64 / steps as f64).round() as usize;
        let done = L - masked.len();
        let preds: Vec<(usize, f64)> = (0..L).map(|p| best(&table[k], p)).collect();
        let conf: Vec<f64> = preds.iter().map(|x| x.1).collect();
        let revealed = take_top(&masked, &conf, target - done);
        for &p in &revealed {
            tokens[p] = Some(preds[p].0);
        }
        let remasked = masked.iter().copied().filter(|p| !revealed.contains(p)).collect();
        trace.push(SimStep {
            focus: None,
            revealed,
            remasked,
            tokens: tokens.clone(),
        });
    }
    trace
}

pub fn simulate_hierarchical(table: &[Vec<f64>], rearg: bool) -> Vec<SimStep> {
    let mut tokens: Vec<Option<usize>> = vec![None; L];
    let mut used = [0usize; K];
    let mut current: Option<usize> = None;
    let mut trace = Vec::new();
    for step in 0..K * IPA {
        let preds: Vec<(usize, f64)> = (0..L).map(|p| best(&table[step], p)).collect();
        let conf: Vec<f64> = preds.iter().map(|x| x.1).collect();
        let open: Vec<usize> = (0..K).filter(|&a| used[a] < IPA).collect();
        let score = |a: usize| -> f64 { ascending_sum((a * D..a * D + D).filter(|&p| tokens[p].is_none()).map(|p| conf[p]).collect()) };
        let focus = match current {
            Some(c) if !rearg && used[c] < IPA => c,
            _ => {
                let mut f = open[0];
                for &a in &open[1..] {
                    if score(a) > score(f) {
                        f = a;
                    }
                }
                f
            }
        };
        current = Some(focus);
        let masked_in_focus: Vec<usize> = (focus * D..focus * D + D).filter(|&p| tokens[p].is_none()).collect();
        let visits_left = IPA - used[focus];
        let q = (masked_in_focus.len() + visits_left - 1) / visits_left;
        let revealed = take_top(&masked_in_focus, &conf, q);
        let mut remasked: Vec<usize> = masked_in_focus.iter().copied().filter(|p| !revealed.contains(p)).collect();
        for &p in &revealed {
            tokens[p] = Some(preds[p].0);
        }
        for &a in &open {
            if a != focus {
                for p in a * D..a * D + D {
                    tokens[p] = None;
                    remasked.push(p);
                }
            }
        }
        remasked.sort();
        used[focus] += 1;
        trace.push(SimStep {
            focus: Some(focus),
            revealed,
            remasked,
            tokens: tokens.clone(),
        });
    }
    trace
}

pub fn random_table(seed: u64, steps: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "oracle", 0);
    let integer = seed % 2 == 1;
    (0..steps)
        .map(|_| {
            (0..L * VA)
                .map(|_| if integer { r.gen_range(0..3) as f64 } else { r.gen_range(-3.0..3.0) })
                .collect()
        })
        .collect()
}

fn as_sim(step: &TraceStep, layout: &VocabLayout) -> SimStep {
    SimStep {
        focus: step.focus,
        revealed: step.revealed.clone(),
        remasked: step.remasked.clone(),
        tokens: step
            .tokens
            .iter()
            .map(|&id| (id != layout.mask_token_id).then(|| (id - layout.special_token_base) as usize))
            .collect(),
    }
}

pub fn run(config: DecodeConfig, table: Vec<Vec<f64>>) -> Vec<SimStep> {
    let layout = VocabLayout::new(8, VA as u32).unwrap();
    let oracle = Oracle {
        table,
        calls: Cell::new(0),
    };
    let cond = Conditioning {
        observation: vec![],
        task_id: 0,
    };
    let out = Decoder::new(config, K, D)
        .unwrap()
        .decode(&oracle, &[1, 2], &cond, &layout, &mut rng::from_seed(0))
        .unwrap();
    assert!(out.tokens.iter().all(|&id| layout.is_action_token(id)));
    out.trace.steps.iter().map(|s| as_sim(s, &layout)).collect()
}
