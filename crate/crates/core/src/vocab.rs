//! Action tokenization and the vocabulary layout.
//!
//! Each per-timestep action has [`ACTION_DIM`] continuous components which are
//! quantized into uniform bins. Bin `b` of any component is represented by the
//! special token `s_b`; the special tokens occupy one contiguous block placed
//! directly after the base vocabulary, followed by the mask token:
//!
//! ```text
//! [0, V)            base vocabulary (prompt words)
//! [V, V + V_a)      special action tokens s_0 .. s_{V_a - 1}
//! V + V_a           mask token
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Components per action: dx, dy, dz, droll, dpitch, dyaw, gripper.
pub const ACTION_DIM: usize = 7;

/// Label value that excludes a position from the loss.
pub const IGNORE_LABEL: i64 = -100;

pub type TokenId = u32;

/// Half-width used to widen a dimension whose observed values never vary.
pub const DEGENERATE_HALF_WIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub base_vocab_size: u32,
    pub action_vocab_size: u32,
    pub mask_token_id: TokenId,
    pub special_token_base: TokenId,
}

impl VocabLayout {
    pub fn new(base_vocab_size: u32, action_vocab_size: u32) -> Result<Self> {
        if base_vocab_size == 0 || action_vocab_size == 0 {
            return Err(Error::config("vocabulary sizes must be positive"));
        }
        Ok(Self {
            base_vocab_size,
            action_vocab_size,
            special_token_base: base_vocab_size,
            mask_token_id: base_vocab_size + action_vocab_size,
        })
    }

    /// Number of distinct input ids: base tokens, action tokens and the mask.
    pub fn input_vocab(&self) -> usize {
        (self.base_vocab_size + self.action_vocab_size + 1) as usize
    }

    pub fn is_action_token(&self, id: TokenId) -> bool {
        id >= self.special_token_base && id < self.special_token_base + self.action_vocab_size
    }

    /// Full-vocabulary id to local action class, or [`IGNORE_LABEL`].
    pub fn map_local(&self, id: TokenId) -> i64 {
        if self.is_action_token(id) {
            i64::from(id - self.special_token_base)
        } else {
            IGNORE_LABEL
        }
    }

    pub fn unmap_local(&self, class: usize) -> Result<TokenId> {
        if class >= self.action_vocab_size as usize {
            return Err(Error::ClassOutOfRange {
                class,
                classes: self.action_vocab_size as usize,
            });
        }
        Ok(self.special_token_base + class as TokenId)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::new(self.base_vocab_size, self.action_vocab_size)?;
        if *self != expected {
            return Err(Error::config(format!(
                "vocab layout must place the action block at {} and the mask at {}",
                expected.special_token_base, expected.mask_token_id
            )));
        }
        Ok(())
    }

    /// Parses a layout from JSON and checks that its blocks are consistent.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let layout: Self = serde_json::from_value(value)?;
        layout.validate()?;
        Ok(layout)
    }
}

/// One delta action.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionVector {
    /// Position displacement (table units).
    pub dpos: [f64; 3],
    /// Rotation change (radians).
    pub drot: [f64; 3],
    /// Open fraction; the gripper opens at >= 0.5 when executed.
    pub gripper: f64,
}

impl ActionVector {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let [x, y, z] = self.dpos;
        let [r, p, w] = self.drot;
        [x, y, z, r, p, w, self.gripper]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        Self {
            dpos: [a[0], a[1], a[2]],
            drot: [a[3], a[4], a[5]],
            gripper: a[6],
        }
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; ACTION_DIM] = a
            .try_into()
            .map_err(|_| Error::shape(format!("action needs {ACTION_DIM} components, got {}", a.len())))?;
        Ok(Self::from_array(arr))
    }
}

/// Uniform quantization ranges, one per action component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: [f64; ACTION_DIM],
    pub hi: [f64; ACTION_DIM],
    pub bins: u32,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl BinSpec {
    pub fn new(lo: [f64; ACTION_DIM], hi: [f64; ACTION_DIM], bins: u32) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("bin count must be positive"));
        }
        for d in 0..ACTION_DIM {
            if !(lo[d].is_finite() && hi[d].is_finite() && lo[d] < hi[d]) {
                return Err(Error::config(format!(
                    "dimension {d}: need finite lo < hi, got [{}, {}]",
                    lo[d], hi[d]
                )));
            }
        }
        Ok(Self { lo, hi, bins })
    }

    /// Fits per-dimension ranges to the `clip_percentile` / `100 - clip_percentile`
    /// percentiles of the data. Constant dimensions are widened to
    /// `value ± DEGENERATE_HALF_WIDTH`.
    pub fn fit(actions: &[ActionVector], bins: u32, clip_percentile: f64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(0.0..50.0).contains(&clip_percentile) {
            return Err(Error::config(format!(
                "clip percentile must lie in [0, 50), got {clip_percentile}"
            )));
        }
        let mut lo = [0.0; ACTION_DIM];
        let mut hi = [0.0; ACTION_DIM];
        let mut column = Vec::with_capacity(actions.len());
        for d in 0..ACTION_DIM {
            column.clear();
            column.extend(actions.iter().map(|a| a.to_array()[d]));
            column.sort_by(f64::total_cmp);
            let (mut l, mut h) = (
                percentile(&column, clip_percentile),
                percentile(&column, 100.0 - clip_percentile),
            );
            if h - l < 1e-12 {
                let c = 0.5 * (l + h);
                l = c - DEGENERATE_HALF_WIDTH;
                h = c + DEGENERATE_HALF_WIDTH;
            }
            lo[d] = l;
            hi[d] = h;
        }
        Self::new(lo, hi, bins)
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.hi[dim] - self.lo[dim]) / f64::from(self.bins)
    }

    /// Bin of `x` in dimension `dim` after clipping. Bins are half-open
    /// `[edge_b, edge_{b+1})`, except that the top bin also takes `hi`.
    pub fn bin_index(&self, dim: usize, x: f64) -> u32 {
        let x = x.clamp(self.lo[dim], self.hi[dim]);
        let b = ((x - self.lo[dim]) / self.width(dim)).floor();
        (b.max(0.0) as u32).min(self.bins - 1)
    }

    pub fn center(&self, dim: usize, bin: u32) -> f64 {
        self.lo[dim] + (f64::from(bin) + 0.5) * self.width(dim)
    }

    pub fn clip(&self, a: &ActionVector) -> ActionVector {
        let mut v = a.to_array();
        for (d, x) in v.iter_mut().enumerate() {
            *x = x.clamp(self.lo[d], self.hi[d]);
        }
        ActionVector::from_array(v)
    }
}

pub fn tokenize_action(a: &ActionVector, bins: &BinSpec, layout: &VocabLayout) -> [TokenId; ACTION_DIM] {
    debug_assert_eq!(bins.bins, layout.action_vocab_size);
    let v = a.to_array();
    let mut out = [0; ACTION_DIM];
    for d in 0..ACTION_DIM {
        out[d] = layout.special_token_base + bins.bin_index(d, v[d]);
    }
    out
}

/// Maps `D` action tokens back to bin centers.
pub fn detokenize(tokens: &[TokenId], bins: &BinSpec, layout: &VocabLayout) -> Result<ActionVector> {
    if tokens.len() != ACTION_DIM {
        return Err(Error::shape(format!(
            "an action has {ACTION_DIM} tokens, got {}",
            tokens.len()
        )));
    }
    let mut v = [0.0; ACTION_DIM];
    for (d, &id) in tokens.iter().enumerate() {
        if !layout.is_action_token(id) {
            return Err(Error::NotActionToken { position: d, id });
        }
        v[d] = bins.center(d, id - layout.special_token_base);
    }
    Ok(ActionVector::from_array(v))
}

/// `K` consecutive continuous actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<ActionVector>,
}

/// `K` consecutive actions in token form, serialized timestep-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenChunk {
    horizon: usize,
    ids: Vec<TokenId>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn tokenize(&self, bins: &BinSpec, layout: &VocabLayout) -> TokenChunk {
        let ids = self
            .actions
            .iter()
            .flat_map(|a| tokenize_action(a, bins, layout))
            .collect();
        TokenChunk {
            horizon: self.actions.len(),
            ids,
        }
    }
}

impl TokenChunk {
    pub fn from_flat(ids: Vec<TokenId>, horizon: usize) -> Result<Self> {
        if ids.len() != horizon * ACTION_DIM {
            return Err(Error::shape(format!(
                "chunk of {horizon} actions needs {} tokens, got {}",
                horizon * ACTION_DIM,
                ids.len()
            )));
        }
        Ok(Self { horizon, ids })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn as_flat(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_flat(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn action(&self, i: usize) -> &[TokenId] {
        &self.ids[i * ACTION_DIM..(i + 1) * ACTION_DIM]
    }

    /// Detokenizes every action; errors name the flat position of the bad id.
    pub fn detokenize(&self, bins: &BinSpec, layout: &VocabLayout) -> Result<ActionChunk> {
        let mut actions = Vec::with_capacity(self.horizon);
        for i in 0..self.horizon {
            let a = detokenize(self.action(i), bins, layout).map_err(|e| match e {
                Error::NotActionToken { position, id } => Error::NotActionToken {
                    position: i * ACTION_DIM + position,
                    id,
                },
                other => other,
            })?;
            actions.push(a);
        }
        Ok(ActionChunk { actions })
    }
}
