//! Forward and backward passes.
//!
//! Each sequence is preceded by `obs_tokens` observation positions. The
//! activations of a batch are stacked into `(batch * (prefix + seq_len)) x
//! embed_dim` row-major buffers so every projection is one GEMM. Layers are
//! pre-norm: `x += attn(ln1(x)); x += mlp(ln2(x))`, with full (non-causal)
//! attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{build_layout, LayerIdx, ParamIdx, ParamLayout, PredictorConfig};
use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_rows, MatMut, MatRef, Scalar};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// A batch of equal-length sequences.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub ids: Vec<TokenId>,
    pub obs: Vec<f64>,
    pub tasks: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: PredictorConfig,
    pub layout: ParamLayout,
    pub(crate) idx: ParamIdx,
    pub params: Vec<T>,
}

#[derive(Debug, Default)]
struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Default)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize, out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let inv_d = c::<T>(1.0 / d as f64);
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
}

/// Accumulates `dg`, `db` and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    d: usize,
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let inv_d = c::<T>(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.len() / d {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xr[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
}

/// `out = x @ w + bias` with `x: rows x d_in`, `w: d_in x d_out`.
fn linear<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let d_out = bias.len();
    for r in 0..rows {
        out[r * d_out..(r + 1) * d_out].copy_from_slice(bias);
    }
    gemm(
        T::one(),
        MatRef::new(x, rows, d_in),
        MatRef::new(w, d_in, d_out),
        T::one(),
        MatMut::new(out, rows, d_out),
    );
}

/// Writes `dw = x^T dy`, `db = colsum(dy)` and returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
) -> Vec<T> {
    gemm(
        T::one(),
        MatRef::new(x, rows, d_in).t(),
        MatRef::new(dy, rows, d_out),
        T::one(),
        MatMut::new(dw, d_in, d_out),
    );
    for r in 0..rows {
        for (b, &g) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
            *b += g;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * d_in];
    gemm(
        T::one(),
        MatRef::new(dy, rows, d_out),
        MatRef::new(w, d_in, d_out).t(),
        T::zero(),
        MatMut::new(&mut dx, rows, d_in),
    );
    dx
}

fn gelu<T: Scalar>(u: T) -> T {
    let inner = c::<T>(GELU_C) * (u + c::<T>(GELU_A) * u * u * u);
    c::<T>(0.5) * u * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let inner = c::<T>(GELU_C) * (u + c::<T>(GELU_A) * u * u * u);
    let th = inner.tanh();
    let dinner = c::<T>(GELU_C) * (T::one() + c::<T>(3.0 * GELU_A) * u * u);
    c::<T>(0.5) * (T::one() + th) + c::<T>(0.5) * u * (T::one() - th * th) * dinner
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model: N(0, 0.02) embeddings and projections,
    /// residual output projections scaled by `1 / sqrt(2 * layers)`, unit
    /// norms and zero biases. The observation projection gets a unit-scale
    /// random bias so the prefix layer norm does not discard pose magnitudes.
    pub fn init<R: Rng + ?Sized>(config: PredictorConfig, rng: &mut R) -> Self {
        let (layout, idx) = build_layout(&config);
        let mut params = vec![T::zero(); layout.total];
        let std_proj = INIT_STD / (2.0 * config.layers as f64).sqrt();
        for info in &layout.tensors {
            let name = info.name.as_str();
            let range = info.range();
            if name.ends_with(".g") {
                params[range].iter_mut().for_each(|p| *p = T::one());
                continue;
            }
            let std = if name.starts_with("obs_proj") && name.ends_with(".b") {
                1.0
            } else if name.ends_with(".b") {
                continue;
            } else if name.ends_with("attn.out.w") || name.ends_with("mlp.fc2.w") {
                std_proj
            } else if name.starts_with("obs_proj") {
                1.0 / (info.shape[0] as f64).sqrt()
            } else {
                INIT_STD
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[range] {
                *p = T::from_f64_lossy(normal.sample(rng));
            }
        }
        Self {
            config,
            layout,
            idx,
            params,
        }
    }

    /// Rebuilds a model from a flat parameter buffer.
    pub fn from_params(config: PredictorConfig, params: Vec<T>) -> Result<Self> {
        let (layout, idx) = build_layout(&config);
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "{} parameters for a model of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            idx,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn p(&self, tensor: usize) -> &[T] {
        &self.params[self.layout.range(tensor)]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, input: &BatchInput) -> Result<()> {
        let cfg = &self.config;
        let (b, n) = (input.batch, input.seq_len);
        if b == 0 {
            return Err(Error::shape("empty batch"));
        }
        if n + cfg.obs_tokens > cfg.max_seq_len || n < cfg.prompt_len {
            return Err(Error::shape(format!(
                "sequence length {n} outside [{}, {}]",
                cfg.prompt_len,
                cfg.max_seq_len - cfg.obs_tokens
            )));
        }
        if input.ids.len() != b * n || input.obs.len() != b * cfg.cond_dim || input.tasks.len() != b {
            return Err(Error::shape("batch buffers disagree with batch/seq_len/cond_dim"));
        }
        if let Some((i, &id)) = input.ids.iter().enumerate().find(|(_, &id)| id as usize >= cfg.vocab_in) {
            return Err(Error::shape(format!("unknown token id {id} at flat position {i}")));
        }
        if let Some(&t) = input.tasks.iter().find(|&&t| t >= cfg.n_tasks) {
            return Err(Error::shape(format!("task id {t} out of range")));
        }
        Ok(())
    }

    /// Logits (`batch * seq_len x classes_out`) without keeping activations.
    pub fn logits(&self, input: &BatchInput) -> Result<Vec<T>> {
        self.forward(input).map(|(logits, _)| logits)
    }

    pub fn forward(&self, input: &BatchInput) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let cfg = &self.config;
        let (b, s, d) = (input.batch, cfg.obs_tokens, cfg.embed_dim);
        let n = s + input.seq_len;
        let rows = b * n;
        let idx = &self.idx;

        let mut x = self.embed(input);
        let mut cache = ForwardCache::default();
        for li in &idx.layers {
            let lc = self.layer_forward(li, &mut x, b, n);
            cache.layers.push(lc);
        }

        cache.xhatf = vec![T::zero(); rows * d];
        cache.rstdf = vec![T::zero(); rows];
        cache.hf = vec![T::zero(); rows * d];
        layer_norm(
            &x,
            self.p(idx.lnf_g),
            self.p(idx.lnf_b),
            d,
            &mut cache.hf,
            &mut cache.xhatf,
            &mut cache.rstdf,
        );
        let mut logits = vec![T::zero(); rows * cfg.classes_out];
        linear(&cache.hf, rows, d, self.p(idx.head_w), self.p(idx.head_b), &mut logits);
        let c = cfg.classes_out;
        let logits = (0..b).flat_map(|bi| logits[(bi * n + s) * c..(bi + 1) * n * c].to_vec()).collect();
        Ok((logits, cache))
    }

    fn embed(&self, input: &BatchInput) -> Vec<T> {
        let cfg = &self.config;
        let (b, s, d) = (input.batch, cfg.obs_tokens, cfg.embed_dim);
        let n = s + input.seq_len;
        let obs: Vec<T> = input.obs.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let tok = self.p(self.idx.tok);
        let pos = self.p(self.idx.pos);
        let task = self.p(self.idx.task);
        let mut prefix = vec![T::zero(); b * s * d];
        linear(&obs, b, cfg.cond_dim, self.p(self.idx.obs_w), self.p(self.idx.obs_b), &mut prefix);
        let mut x = vec![T::zero(); b * n * d];
        for bi in 0..b {
            let tk = &task[input.tasks[bi] * d..(input.tasks[bi] + 1) * d];
            x[bi * n * d..(bi * n + s) * d].copy_from_slice(&prefix[bi * s * d..(bi + 1) * s * d]);
            for ni in 0..n {
                let r = bi * n + ni;
                let row = &mut x[r * d..(r + 1) * d];
                if ni >= s {
                    let id = input.ids[bi * input.seq_len + ni - s] as usize;
                    for j in 0..d {
                        row[j] += tok[id * d + j];
                    }
                }
                for j in 0..d {
                    row[j] += pos[ni * d + j] + tk[j];
                }
            }
        }
        x
    }

    fn layer_forward(&self, li: &LayerIdx, x: &mut [T], b: usize, n: usize) -> LayerCache<T> {
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let hidden = cfg.mlp_ratio * d;
        let rows = b * n;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let mut lc = LayerCache {
            xhat1: vec![T::zero(); rows * d],
            rstd1: vec![T::zero(); rows],
            h1: vec![T::zero(); rows * d],
            qkv: vec![T::zero(); rows * 3 * d],
            probs: vec![T::zero(); b * heads * n * n],
            att: vec![T::zero(); rows * d],
            xhat2: vec![T::zero(); rows * d],
            rstd2: vec![T::zero(); rows],
            h2: vec![T::zero(); rows * d],
            u: vec![T::zero(); rows * hidden],
            a: vec![T::zero(); rows * hidden],
        };

        layer_norm(x, self.p(li.ln1_g), self.p(li.ln1_b), d, &mut lc.h1, &mut lc.xhat1, &mut lc.rstd1);
        linear(&lc.h1, rows, d, self.p(li.qkv_w), self.p(li.qkv_b), &mut lc.qkv);
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * n * 3 * d;
                let q = MatRef::strided(&lc.qkv, base + h * dh, n, dh, 3 * d);
                let k = MatRef::strided(&lc.qkv, base + d + h * dh, n, dh, 3 * d);
                let v = MatRef::strided(&lc.qkv, base + 2 * d + h * dh, n, dh, 3 * d);
                let off = (bi * heads + h) * n * n;
                let scores = &mut lc.probs[off..off + n * n];
                gemm(scale, q, k.t(), T::zero(), MatMut::new(scores, n, n));
                softmax_rows(scores, n);
                gemm(
                    T::one(),
                    MatRef::new(&lc.probs[off..off + n * n], n, n),
                    v,
                    T::zero(),
                    MatMut::strided(&mut lc.att, bi * n * d + h * dh, n, dh, d),
                );
            }
        }
        let mut y = vec![T::zero(); rows * d];
        linear(&lc.att, rows, d, self.p(li.out_w), self.p(li.out_b), &mut y);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }

        layer_norm(x, self.p(li.ln2_g), self.p(li.ln2_b), d, &mut lc.h2, &mut lc.xhat2, &mut lc.rstd2);
        linear(&lc.h2, rows, d, self.p(li.fc1_w), self.p(li.fc1_b), &mut lc.u);
        for (a, &u) in lc.a.iter_mut().zip(&lc.u) {
            *a = gelu(u);
        }
        linear(&lc.a, rows, hidden, self.p(li.fc2_w), self.p(li.fc2_b), &mut y);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }
        lc
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the logits.
    pub fn backward(&self, input: &BatchInput, cache: &ForwardCache<T>, dlogits: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let (b, s, d, c) = (input.batch, cfg.obs_tokens, cfg.embed_dim, cfg.classes_out);
        let n = s + input.seq_len;
        let rows = b * n;
        let idx = &self.idx;
        let mut grads = vec![T::zero(); self.layout.total];

        let mut dfull = vec![T::zero(); rows * c];
        for bi in 0..b {
            let m = input.seq_len * c;
            dfull[(bi * n + s) * c..(bi + 1) * n * c].copy_from_slice(&dlogits[bi * m..(bi + 1) * m]);
        }
        let (hw, hb) = (self.layout.range(idx.head_w), self.layout.range(idx.head_b));
        let dhf = {
            let (dw, db) = split_two(&mut grads, hw, hb);
            linear_backward(&cache.hf, &dfull, rows, d, c, self.p(idx.head_w), dw, db, true)
        };
        let mut dx = vec![T::zero(); rows * d];
        {
            let (dg, db) = split_two(&mut grads, self.layout.range(idx.lnf_g), self.layout.range(idx.lnf_b));
            layer_norm_backward(&dhf, &cache.xhatf, &cache.rstdf, self.p(idx.lnf_g), d, dg, db, &mut dx);
        }

        for (li, lc) in idx.layers.iter().zip(&cache.layers).rev() {
            self.layer_backward(li, lc, &mut dx, b, n, &mut grads);
        }

        self.embed_backward(input, &dx, &mut grads);
        grads
    }

    fn layer_backward(&self, li: &LayerIdx, lc: &LayerCache<T>, dx: &mut [T], b: usize, n: usize, grads: &mut [T]) {
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let hidden = cfg.mlp_ratio * d;
        let rows = b * n;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let r = |t: usize| self.layout.range(t);

        // MLP branch.
        let mut da = {
            let (dw, db) = split_two(grads, r(li.fc2_w), r(li.fc2_b));
            linear_backward(&lc.a, dx, rows, hidden, d, self.p(li.fc2_w), dw, db, true)
        };
        for (g, &u) in da.iter_mut().zip(&lc.u) {
            *g *= gelu_grad(u);
        }
        let dh2 = {
            let (dw, db) = split_two(grads, r(li.fc1_w), r(li.fc1_b));
            linear_backward(&lc.h2, &da, rows, d, hidden, self.p(li.fc1_w), dw, db, true)
        };
        {
            let (dg, db) = split_two(grads, r(li.ln2_g), r(li.ln2_b));
            layer_norm_backward(&dh2, &lc.xhat2, &lc.rstd2, self.p(li.ln2_g), d, dg, db, dx);
        }

        // Attention branch.
        let datt = {
            let (dw, db) = split_two(grads, r(li.out_w), r(li.out_b));
            linear_backward(&lc.att, dx, rows, d, d, self.p(li.out_w), dw, db, true)
        };
        let mut dqkv = vec![T::zero(); rows * 3 * d];
        let mut dp = vec![T::zero(); n * n];
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * n * 3 * d;
                let q = MatRef::strided(&lc.qkv, base + h * dh, n, dh, 3 * d);
                let k = MatRef::strided(&lc.qkv, base + d + h * dh, n, dh, 3 * d);
                let v = MatRef::strided(&lc.qkv, base + 2 * d + h * dh, n, dh, 3 * d);
                let off = (bi * heads + h) * n * n;
                let probs = &lc.probs[off..off + n * n];
                let dout = MatRef::strided(&datt, bi * n * d + h * dh, n, dh, d);

                gemm(T::one(), dout, v.t(), T::zero(), MatMut::new(&mut dp, n, n));
                gemm(
                    T::one(),
                    MatRef::new(probs, n, n).t(),
                    dout,
                    T::zero(),
                    MatMut::strided(&mut dqkv, base + 2 * d + h * dh, n, dh, 3 * d),
                );
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..n {
                    let pr = &probs[i * n..(i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&p, &g)| p * g).sum();
                    for (g, &p) in dr.iter_mut().zip(pr) {
                        *g = p * (*g - dot);
                    }
                }
                gemm(
                    scale,
                    MatRef::new(&dp, n, n),
                    k,
                    T::zero(),
                    MatMut::strided(&mut dqkv, base + h * dh, n, dh, 3 * d),
                );
                gemm(
                    scale,
                    MatRef::new(&dp, n, n).t(),
                    q,
                    T::zero(),
                    MatMut::strided(&mut dqkv, base + d + h * dh, n, dh, 3 * d),
                );
            }
        }
        let dh1 = {
            let (dw, db) = split_two(grads, r(li.qkv_w), r(li.qkv_b));
            linear_backward(&lc.h1, &dqkv, rows, d, 3 * d, self.p(li.qkv_w), dw, db, true)
        };
        let (dg, db) = split_two(grads, r(li.ln1_g), r(li.ln1_b));
        layer_norm_backward(&dh1, &lc.xhat1, &lc.rstd1, self.p(li.ln1_g), d, dg, db, dx);
    }

    fn embed_backward(&self, input: &BatchInput, dx: &[T], grads: &mut [T]) {
        let cfg = &self.config;
        let (b, s, d) = (input.batch, cfg.obs_tokens, cfg.embed_dim);
        let n = s + input.seq_len;
        let idx = &self.idx;
        let obs: Vec<T> = input.obs.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mut dprefix = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            dprefix.extend_from_slice(&dx[bi * n * d..(bi * n + s) * d]);
        }
        let (dw, db) = split_two(grads, self.layout.range(idx.obs_w), self.layout.range(idx.obs_b));
        linear_backward(&obs, &dprefix, b, cfg.cond_dim, s * d, self.p(idx.obs_w), dw, db, false);
        for bi in 0..b {
            let task = self.layout.range(idx.task).start + input.tasks[bi] * d;
            for ni in 0..n {
                let r = bi * n + ni;
                let g = &dx[r * d..(r + 1) * d];
                let pos = self.layout.range(idx.pos).start + ni * d;
                for j in 0..d {
                    grads[pos + j] += g[j];
                    grads[task + j] += g[j];
                }
                if ni >= s {
                    let id = input.ids[bi * input.seq_len + ni - s] as usize;
                    let tok = self.layout.range(idx.tok).start + id * d;
                    for j in 0..d {
                        grads[tok + j] += g[j];
                    }
                }
            }
        }
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer.
fn split_two<T>(buf: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start || b.end <= a.start, "ranges overlap");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        let bb = &mut lo[b];
        (&mut hi[..a.end - a.start], bb)
    }
}
