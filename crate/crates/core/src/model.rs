//! Bidirectional transformer encoder with a tanh pooler and three heads:
//! question plausibility, response plausibility, and per-token start/end
//! span logits. Gradients are computed by hand-written reverse mode.
//!
//! Every example is run over its non-pad positions only. Pad keys are thus
//! excluded from attention exactly, and pad rows of `hidden_states` are zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenizedInput;
use crate::training::{loss_with_logit_grads, LogitGrads, LossError, LossReport, Targets, TaskSet};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

/// Examples per gradient accumulation chunk. Fixed so that the summation order,
/// and therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("input has no response tokens")]
    NoResponseTokens,
    #[error("input has no non-pad tokens")]
    EmptyInput,
    #[error("non-finite activation in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub head_dropout_p: f64,
    pub active_tasks: TaskSet,
}

impl ModelConfig {
    /// Small encoder that trains from scratch on a laptop.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            vocab_size,
            max_len: 32,
            head_dropout_p: 0.5,
            active_tasks: TaskSet::ALL,
        }
    }

    /// Dimensions of the 12-layer, 768-wide pretrained encoder (uncased
    /// WordPiece vocabulary, 512 positions). Used for parameter accounting only.
    pub fn reference() -> Self {
        Self {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size: crate::tokenizer::REFERENCE_VOCAB_SIZE,
            max_len: 512,
            head_dropout_p: 0.5,
            active_tasks: TaskSet::ALL,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1");
        }
        if self.num_heads == 0 {
            return fail("num_heads must be >= 1");
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("ffn_dim, vocab_size and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.head_dropout_p) {
            return fail("head_dropout_p must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, t) = (self.hidden_dim, self.ffn_dim, self.vocab_size, self.max_len);
        let embeddings = v * d + t * d + 2 * d + 2 * d;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        let pooler = d * d + d;
        let heads = 3 * (2 * d + 2);
        embeddings + self.num_layers * (attention + ffn + norms) + pooler + heads
    }
}

/// Row-major matrix; vectors are stored as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    fn normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub attn_norm_g: Tensor,
    pub attn_norm_b: Tensor,
    pub ffn_in_w: Tensor,
    pub ffn_in_b: Tensor,
    pub ffn_out_w: Tensor,
    pub ffn_out_b: Tensor,
    pub ffn_norm_g: Tensor,
    pub ffn_norm_b: Tensor,
}

impl LayerParams {
    pub const NAMES: [&'static str; 16] = [
        "attention.query.weight",
        "attention.query.bias",
        "attention.key.weight",
        "attention.key.bias",
        "attention.value.weight",
        "attention.value.bias",
        "attention.output.weight",
        "attention.output.bias",
        "attention.norm.gain",
        "attention.norm.bias",
        "ffn.input.weight",
        "ffn.input.bias",
        "ffn.output.weight",
        "ffn.output.bias",
        "ffn.norm.gain",
        "ffn.norm.bias",
    ];

    fn shaped(d: usize, f: usize, mut matrix: impl FnMut(usize, usize) -> Tensor) -> Self {
        Self {
            query_w: matrix(d, d),
            query_b: Tensor::zeros(1, d),
            key_w: matrix(d, d),
            key_b: Tensor::zeros(1, d),
            value_w: matrix(d, d),
            value_b: Tensor::zeros(1, d),
            attn_out_w: matrix(d, d),
            attn_out_b: Tensor::zeros(1, d),
            attn_norm_g: Tensor::filled(1, d, 1.0),
            attn_norm_b: Tensor::zeros(1, d),
            ffn_in_w: matrix(d, f),
            ffn_in_b: Tensor::zeros(1, f),
            ffn_out_w: matrix(f, d),
            ffn_out_b: Tensor::zeros(1, d),
            ffn_norm_g: Tensor::filled(1, d, 1.0),
            ffn_norm_b: Tensor::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.query_w,
            &self.query_b,
            &self.key_w,
            &self.key_b,
            &self.value_w,
            &self.value_b,
            &self.attn_out_w,
            &self.attn_out_b,
            &self.attn_norm_g,
            &self.attn_norm_b,
            &self.ffn_in_w,
            &self.ffn_in_b,
            &self.ffn_out_w,
            &self.ffn_out_b,
            &self.ffn_norm_g,
            &self.ffn_norm_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.attn_out_w,
            &mut self.attn_out_b,
            &mut self.attn_norm_g,
            &mut self.attn_norm_b,
            &mut self.ffn_in_w,
            &mut self.ffn_in_b,
            &mut self.ffn_out_w,
            &mut self.ffn_out_b,
            &mut self.ffn_norm_g,
            &mut self.ffn_norm_b,
        ]
    }
}

/// All learnable weights. The same type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_emb: Tensor,
    pub position_emb: Tensor,
    pub segment_emb: Tensor,
    pub emb_norm_g: Tensor,
    pub emb_norm_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub qp_w: Tensor,
    pub qp_b: Tensor,
    pub rp_w: Tensor,
    pub rp_b: Tensor,
    /// Column 0 produces start logits, column 1 end logits.
    pub span_w: Tensor,
    pub span_b: Tensor,
}

impl ModelParams {
    fn shaped(config: &ModelConfig, mut matrix: impl FnMut(usize, usize) -> Tensor) -> Self {
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let token_emb = matrix(config.vocab_size, d);
        let position_emb = matrix(config.max_len, d);
        let segment_emb = matrix(2, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::shaped(d, f, &mut matrix))
            .collect();
        Self {
            token_emb,
            position_emb,
            segment_emb,
            emb_norm_g: Tensor::filled(1, d, 1.0),
            emb_norm_b: Tensor::zeros(1, d),
            layers,
            pooler_w: matrix(d, d),
            pooler_b: Tensor::zeros(1, d),
            qp_w: matrix(d, 2),
            qp_b: Tensor::zeros(1, 2),
            rp_w: matrix(d, 2),
            rp_b: Tensor::zeros(1, 2),
            span_w: matrix(d, 2),
            span_b: Tensor::zeros(1, 2),
        }
    }

    /// Tensors shaped for `config` with every entry zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut p = Self::shaped(config, Tensor::zeros);
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        p
    }

    /// Tensor names in declaration order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "embeddings.token",
            "embeddings.position",
            "embeddings.segment",
            "embeddings.norm.gain",
            "embeddings.norm.bias",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for l in 0..self.layers.len() {
            names.extend(LayerParams::NAMES.iter().map(|n| format!("layer.{l}.{n}")));
        }
        names.extend(
            [
                "pooler.weight",
                "pooler.bias",
                "qp_head.weight",
                "qp_head.bias",
                "rp_head.weight",
                "rp_head.bias",
                "span_head.weight",
                "span_head.bias",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        names
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_emb,
            &self.position_emb,
            &self.segment_emb,
            &self.emb_norm_g,
            &self.emb_norm_b,
        ];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([
            &self.pooler_w,
            &self.pooler_b,
            &self.qp_w,
            &self.qp_b,
            &self.rp_w,
            &self.rp_b,
            &self.span_w,
            &self.span_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_emb,
            &mut self.position_emb,
            &mut self.segment_emb,
            &mut self.emb_norm_g,
            &mut self.emb_norm_b,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.pooler_w,
            &mut self.pooler_b,
            &mut self.qp_w,
            &mut self.qp_b,
            &mut self.rp_w,
            &mut self.rp_b,
            &mut self.span_w,
            &mut self.span_b,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    /// Checks tensor shapes against `config`.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let expected = ModelParams::shaped(config, Tensor::zeros);
        self.layers.len() == expected.layers.len()
            && self
                .tensors()
                .iter()
                .zip(expected.tensors())
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }
}

/// Embedding tables and affine weights drawn from N(0, 0.02²); biases zero,
/// layer-norm gains one.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::shaped(config, |r, c| Tensor::normal(r, c, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Head dropout active.
    Train,
    /// Deterministic.
    Eval,
}

/// Per-example model output. Distributions over tokens have length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[implausible, plausible]`
    pub qp_prob: [f64; 2],
    pub rp_prob: [f64; 2],
    pub start_dist: Vec<f64>,
    pub end_dist: Vec<f64>,
    /// `T x D`, zero rows at pad positions.
    pub hidden_states: Tensor,
}

impl ModelOutput {
    pub fn qp_score(&self) -> f64 {
        self.qp_prob[1]
    }

    pub fn rp_score(&self) -> f64 {
        self.rp_prob[1]
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `x (n x din) * w (din x dout) + b`
fn affine(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.rows, w.cols);
    let mut y = Vec::with_capacity(n * dout);
    for i in 0..n {
        y.extend_from_slice(&b.data);
        let yi = &mut y[i * dout..(i + 1) * dout];
        for (k, &xik) in x[i * din..(i + 1) * din].iter().enumerate() {
            if xik == 0.0 {
                continue;
            }
            for (yij, wkj) in yi.iter_mut().zip(w.row(k)) {
                *yij += xik * wkj;
            }
        }
    }
    y
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and returns `dx = dy w^T`.
fn affine_backward(x: &[f64], n: usize, w: &Tensor, dy: &[f64], dw: &mut Tensor, db: &mut Tensor) -> Vec<f64> {
    let (din, dout) = (w.rows, w.cols);
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyi = &dy[i * dout..(i + 1) * dout];
        if dyi.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (dbj, g) in db.data.iter_mut().zip(dyi) {
            *dbj += g;
        }
        let xi = &x[i * din..(i + 1) * din];
        let dxi = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wk = w.row(k);
            let mut acc = 0.0;
            for (g, wkj) in dyi.iter().zip(wk) {
                acc += g * wkj;
            }
            dxi[k] = acc;
            let xik = xi[k];
            if xik != 0.0 {
                for (dwkj, g) in dw.row_mut(k).iter_mut().zip(dyi) {
                    *dwkj += xik * g;
                }
            }
        }
    }
    dx
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, g: &Tensor, b: &Tensor) -> (Vec<f64>, NormCache) {
    let d = g.cols;
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = g.data[j] * h + b.data[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    n: usize,
    cache: &NormCache,
    g: &Tensor,
    dg: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let d = g.cols;
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for j in 0..d {
            dg.data[j] += dyi[j] * xh[j];
            db.data[j] += dyi[j];
            dxhat[j] = dyi[j] * g.data[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[i] / d as f64;
        for j in 0..d {
            dx[i * d + j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn check_finite(values: &[f64], site: impl FnOnce() -> String) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(site()))
    }
}

// ---------------------------------------------------------------------------
// forward

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `H x n x n` attention probabilities.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn_norm: NormCache,
    h1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    ffn_norm: NormCache,
}

/// Intermediate values of one example's forward pass, kept for backprop.
pub struct ForwardCache {
    /// Original indices of the non-pad positions.
    positions: Vec<usize>,
    emb_norm: NormCache,
    layers: Vec<LayerCache>,
    final_hidden: Vec<f64>,
    pooled: Vec<f64>,
    qp_mask: Option<Vec<f64>>,
    rp_mask: Option<Vec<f64>>,
    qp_in: Vec<f64>,
    rp_in: Vec<f64>,
    /// Gathered rows that belong to the response.
    response_rows: Vec<usize>,
    num_heads: usize,
}

impl ForwardCache {
    /// Attention probabilities of `(layer, head)` over the non-pad positions,
    /// rows are queries.
    pub fn attention(&self, layer: usize, head: usize) -> Vec<Vec<f64>> {
        let n = self.positions.len();
        let p = &self.layers[layer].probs[head * n * n..(head + 1) * n * n];
        p.chunks(n).map(<[f64]>::to_vec).collect()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

fn layer_forward(lp: &LayerParams, cfg: &ModelConfig, x: Vec<f64>, n: usize) -> (Vec<f64>, LayerCache) {
    let d = cfg.hidden_dim;
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(&x, n, &lp.query_w, &lp.query_b);
    let k = affine(&x, n, &lp.key_w, &lp.key_b);
    let v = affine(&x, n, &lp.value_w, &lp.value_b);
    let mut probs = vec![0.0; h * n * n];
    let mut ctx = vec![0.0; n * d];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            let ci = &mut ctx[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                for (c, vj) in ci.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *c += p * vj;
                }
            }
        }
    }
    let attn = affine(&ctx, n, &lp.attn_out_w, &lp.attn_out_b);
    let h1_pre: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let (h1, attn_norm) = layer_norm(&h1_pre, n, &lp.attn_norm_g, &lp.attn_norm_b);
    let ffn_pre = affine(&h1, n, &lp.ffn_in_w, &lp.ffn_in_b);
    let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
    let ffn_out = affine(&ffn_act, n, &lp.ffn_out_w, &lp.ffn_out_b);
    let h2_pre: Vec<f64> = h1.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
    let (out, ffn_norm) = layer_norm(&h2_pre, n, &lp.ffn_norm_g, &lp.ffn_norm_b);
    (
        out,
        LayerCache {
            input: x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_norm,
            h1,
            ffn_pre,
            ffn_act,
            ffn_norm,
        },
    )
}

fn dropout_mask<R: Rng>(d: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..d).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

fn two_way_head(x: &[f64], w: &Tensor, b: &Tensor) -> [f64; 2] {
    let logits = affine(x, 1, w, b);
    let mut p = [logits[0], logits[1]];
    softmax_in_place(&mut p);
    p
}

/// Forward pass for one example. `dropout` supplies randomness for the
/// classification-head dropout; `None` means eval mode.
pub fn forward_example(
    params: &ModelParams,
    config: &ModelConfig,
    input: &TokenizedInput,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(ModelOutput, ForwardCache), ModelError> {
    let d = config.hidden_dim;
    let t = input.len();
    if t > config.max_len {
        return Err(ModelError::TooLong {
            len: t,
            max_len: config.max_len,
        });
    }
    let positions: Vec<usize> = (0..t).filter(|&i| !input.pad_mask[i]).collect();
    let n = positions.len();
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    let response_rows: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, &p)| input.is_response_token(p))
        .map(|(r, _)| r)
        .collect();
    if response_rows.is_empty() {
        return Err(ModelError::NoResponseTokens);
    }

    let mut emb = vec![0.0; n * d];
    for (r, &p) in positions.iter().enumerate() {
        let id = input.token_ids[p];
        if id as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                position: p,
                vocab_size: config.vocab_size,
            });
        }
        let seg = usize::from(input.segment_ids[p].min(1));
        let tok = params.token_emb.row(id as usize);
        let pos = params.position_emb.row(p);
        let sg = params.segment_emb.row(seg);
        for j in 0..d {
            emb[r * d + j] = tok[j] + pos[j] + sg[j];
        }
    }
    let (mut x, emb_norm) = layer_norm(&emb, n, &params.emb_norm_g, &params.emb_norm_b);
    check_finite(&x, || "embeddings".into())?;

    let mut layers = Vec::with_capacity(config.num_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(lp, config, x, n);
        check_finite(&out, || format!("encoder layer {l}"))?;
        layers.push(cache);
        x = out;
    }

    let pooled: Vec<f64> = affine(&x[..d], 1, &params.pooler_w, &params.pooler_b)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let (qp_mask, rp_mask) = match dropout {
        Some(rng) => (
            Some(dropout_mask(d, config.head_dropout_p, rng)),
            Some(dropout_mask(d, config.head_dropout_p, rng)),
        ),
        None => (None, None),
    };
    let apply = |mask: &Option<Vec<f64>>| match mask {
        Some(m) => pooled.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => pooled.clone(),
    };
    let qp_in: Vec<f64> = apply(&qp_mask);
    let rp_in: Vec<f64> = apply(&rp_mask);
    let qp_prob = two_way_head(&qp_in, &params.qp_w, &params.qp_b);
    let rp_prob = two_way_head(&rp_in, &params.rp_w, &params.rp_b);
    check_finite(&[qp_prob[0], qp_prob[1], rp_prob[0], rp_prob[1]], || {
        "classification heads".into()
    })?;

    let span_logits = affine(&x, n, &params.span_w, &params.span_b);
    let mut start: Vec<f64> = response_rows.iter().map(|&r| span_logits[2 * r]).collect();
    let mut end: Vec<f64> = response_rows.iter().map(|&r| span_logits[2 * r + 1]).collect();
    softmax_in_place(&mut start);
    softmax_in_place(&mut end);
    check_finite(&start, || "span head".into())?;
    check_finite(&end, || "span head".into())?;
    let mut start_dist = vec![0.0; t];
    let mut end_dist = vec![0.0; t];
    for (k, &r) in response_rows.iter().enumerate() {
        start_dist[positions[r]] = start[k];
        end_dist[positions[r]] = end[k];
    }
    let mut hidden_states = Tensor::zeros(t, d);
    for (r, &p) in positions.iter().enumerate() {
        hidden_states.row_mut(p).copy_from_slice(&x[r * d..(r + 1) * d]);
    }

    Ok((
        ModelOutput {
            qp_prob,
            rp_prob,
            start_dist,
            end_dist,
            hidden_states,
        },
        ForwardCache {
            positions,
            emb_norm,
            layers,
            final_hidden: x,
            pooled,
            qp_mask,
            rp_mask,
            qp_in,
            rp_in,
            response_rows,
            num_heads: config.num_heads,
        },
    ))
}

/// Batched forward. In train mode one dropout seed per example is drawn from
/// `rng` up front, so results are independent of scheduling.
pub fn forward<R: Rng>(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[TokenizedInput],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<ModelOutput>, ModelError> {
    let seeds = draw_seeds(batch.len(), mode, rng);
    batch
        .par_iter()
        .zip(seeds)
        .map(|(input, seed)| {
            let mut dropout = seed.map(ChaCha8Rng::seed_from_u64);
            forward_example(params, config, input, dropout.as_mut()).map(|(out, _)| out)
        })
        .collect()
}

/// Eval-mode forward.
pub fn forward_eval(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[TokenizedInput],
) -> Result<Vec<ModelOutput>, ModelError> {
    batch
        .par_iter()
        .map(|input| forward_example(params, config, input, None).map(|(out, _)| out))
        .collect()
}

fn draw_seeds<R: Rng>(n: usize, mode: Mode, rng: &mut R) -> Vec<Option<u64>> {
    match mode {
        Mode::Train => (0..n).map(|_| Some(rng.gen())).collect(),
        Mode::Eval => vec![None; n],
    }
}

// ---------------------------------------------------------------------------
// backward

fn layer_backward(
    lp: &LayerParams,
    cache: &LayerCache,
    cfg: &ModelConfig,
    n: usize,
    dout: &[f64],
    g: &mut LayerParams,
) -> Vec<f64> {
    let d = cfg.hidden_dim;
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let dh2 = layer_norm_backward(
        dout,
        n,
        &cache.ffn_norm,
        &lp.ffn_norm_g,
        &mut g.ffn_norm_g,
        &mut g.ffn_norm_b,
    );
    let dact = affine_backward(
        &cache.ffn_act,
        n,
        &lp.ffn_out_w,
        &dh2,
        &mut g.ffn_out_w,
        &mut g.ffn_out_b,
    );
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&cache.ffn_pre)
        .map(|(g, &z)| g * gelu_grad(z))
        .collect();
    let mut dh1 = affine_backward(&cache.h1, n, &lp.ffn_in_w, &dpre, &mut g.ffn_in_w, &mut g.ffn_in_b);
    for (a, b) in dh1.iter_mut().zip(&dh2) {
        *a += b;
    }

    let dh1_pre = layer_norm_backward(
        &dh1,
        n,
        &cache.attn_norm,
        &lp.attn_norm_g,
        &mut g.attn_norm_g,
        &mut g.attn_norm_b,
    );
    let dctx = affine_backward(
        &cache.ctx,
        n,
        &lp.attn_out_w,
        &dh1_pre,
        &mut g.attn_out_w,
        &mut g.attn_out_b,
    );

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for head in 0..h {
        let off = head * dh;
        for i in 0..n {
            let p = &cache.probs[(head * n + i) * n..(head * n + i + 1) * n];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..n {
                let vj = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += p[j] * dp[j];
                for (dvjc, c) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                    *dvjc += p[j] * c;
                }
            }
            for j in 0..n {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                    dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                }
            }
        }
    }

    let mut dx = dh1_pre;
    for (w, dw, db, dy) in [
        (&lp.query_w, &mut g.query_w, &mut g.query_b, &dq),
        (&lp.key_w, &mut g.key_w, &mut g.key_b, &dk),
        (&lp.value_w, &mut g.value_w, &mut g.value_b, &dv),
    ] {
        let part = affine_backward(&cache.input, n, w, dy, dw, db);
        for (a, p) in dx.iter_mut().zip(part) {
            *a += p;
        }
    }
    dx
}

/// Accumulates the gradient of one example into `grads`, given the loss
/// gradient with respect to the head logits.
pub fn backward_example(
    params: &ModelParams,
    config: &ModelConfig,
    input: &TokenizedInput,
    cache: &ForwardCache,
    logit_grads: &LogitGrads,
    grads: &mut ModelParams,
) {
    if logit_grads.is_zero() {
        return;
    }
    let d = config.hidden_dim;
    let n = cache.positions.len();
    let mut dx = vec![0.0; n * d];

    // span head
    let mut dspan = vec![0.0; n * 2];
    let mut any_span = false;
    for &r in &cache.response_rows {
        let p = cache.positions[r];
        dspan[2 * r] = logit_grads.start[p];
        dspan[2 * r + 1] = logit_grads.end[p];
        any_span |= dspan[2 * r] != 0.0 || dspan[2 * r + 1] != 0.0;
    }
    if any_span {
        dx = affine_backward(
            &cache.final_hidden,
            n,
            &params.span_w,
            &dspan,
            &mut grads.span_w,
            &mut grads.span_b,
        );
    }

    // classification heads
    let mut dpooled = vec![0.0; d];
    for (logits, w, gw, gb, input_vec, mask) in [
        (
            &logit_grads.qp,
            &params.qp_w,
            &mut grads.qp_w,
            &mut grads.qp_b,
            &cache.qp_in,
            &cache.qp_mask,
        ),
        (
            &logit_grads.rp,
            &params.rp_w,
            &mut grads.rp_w,
            &mut grads.rp_b,
            &cache.rp_in,
            &cache.rp_mask,
        ),
    ] {
        if logits.iter().all(|&g| g == 0.0) {
            continue;
        }
        let dz = affine_backward(input_vec, 1, w, logits, gw, gb);
        match mask {
            Some(m) => dpooled.iter_mut().zip(dz).zip(m).for_each(|((a, g), k)| *a += g * k),
            None => dpooled.iter_mut().zip(dz).for_each(|(a, g)| *a += g),
        }
    }
    if dpooled.iter().any(|&g| g != 0.0) {
        let dpre: Vec<f64> = dpooled
            .iter()
            .zip(&cache.pooled)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect();
        let dcls = affine_backward(
            &cache.final_hidden[..d],
            1,
            &params.pooler_w,
            &dpre,
            &mut grads.pooler_w,
            &mut grads.pooler_b,
        );
        for (a, g) in dx[..d].iter_mut().zip(dcls) {
            *a += g;
        }
    }

    for (l, lp) in params.layers.iter().enumerate().rev() {
        dx = layer_backward(lp, &cache.layers[l], config, n, &dx, &mut grads.layers[l]);
    }
    let demb = layer_norm_backward(
        &dx,
        n,
        &cache.emb_norm,
        &params.emb_norm_g,
        &mut grads.emb_norm_g,
        &mut grads.emb_norm_b,
    );
    for (r, &p) in cache.positions.iter().enumerate() {
        let g = &demb[r * d..(r + 1) * d];
        let id = input.token_ids[p] as usize;
        let seg = usize::from(input.segment_ids[p].min(1));
        for (dst, v) in grads.token_emb.row_mut(id).iter_mut().zip(g) {
            *dst += v;
        }
        for (dst, v) in grads.position_emb.row_mut(p).iter_mut().zip(g) {
            *dst += v;
        }
        for (dst, v) in grads.segment_emb.row_mut(seg).iter_mut().zip(g) {
            *dst += v;
        }
    }
    debug_assert_eq!(cache.num_heads, config.num_heads);
}

/// Loss and its exact gradient for every parameter over a batch.
///
/// Tasks outside `taskset` contribute nothing, so their head parameters get
/// exactly zero gradient. Per-example gradients are summed in fixed-size
/// chunks in batch order, which keeps the result bitwise reproducible.
#[allow(clippy::too_many_arguments)]
pub fn backward<R: Rng>(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[TokenizedInput],
    targets: &[Targets],
    taskset: TaskSet,
    task_weights: [f64; 3],
    mode: Mode,
    rng: &mut R,
) -> Result<(LossReport, ModelParams), ModelError> {
    assert_eq!(batch.len(), targets.len(), "batch/targets length mismatch");
    let seeds = draw_seeds(batch.len(), mode, rng);
    let forwards: Vec<(ModelOutput, ForwardCache)> = batch
        .par_iter()
        .zip(seeds)
        .map(|(input, seed)| {
            let mut dropout = seed.map(ChaCha8Rng::seed_from_u64);
            forward_example(params, config, input, dropout.as_mut())
        })
        .collect::<Result<_, _>>()?;
    let outputs: Vec<&ModelOutput> = forwards.iter().map(|(o, _)| o).collect();
    let (report, logit_grads) = loss_with_logit_grads(&outputs, targets, taskset, task_weights)?;

    let chunk_grads: Vec<ModelParams> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut g = ModelParams::zeros(config);
            for &i in idx {
                backward_example(params, config, &batch[i], &forwards[i].1, &logit_grads[i], &mut g);
            }
            g
        })
        .collect();
    let mut grads = ModelParams::zeros(config);
    for g in &chunk_grads {
        grads.add_assign(g);
    }
    Ok((report, grads))
}

// ---------------------------------------------------------------------------
// span decoding

/// Best `(start, end)` token pair maximizing `start_dist[s] * end_dist[e]`
/// with `s <= e`, both response tokens, and at most `max_answer_tokens`
/// tokens long when given. Ties go to the smallest `s`, then smallest `e`.
/// Returns `None` only when the input has no response tokens.
pub fn predict_span(
    output: &ModelOutput,
    input: &TokenizedInput,
    max_answer_tokens: Option<usize>,
) -> Option<(usize, usize)> {
    let t = input.len().min(output.start_dist.len()).min(output.end_dist.len());
    let width = max_answer_tokens.unwrap_or(usize::MAX).max(1);
    // Sliding-window maximum of start_dist over response positions; the front
    // holds the smallest index attaining the window maximum.
    let mut window: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut best: Option<(f64, usize, usize)> = None;
    for e in 0..t {
        if !input.is_response_token(e) {
            continue;
        }
        while window
            .back()
            .is_some_and(|&b| output.start_dist[b] < output.start_dist[e])
        {
            window.pop_back();
        }
        window.push_back(e);
        while window.front().is_some_and(|&f| e - f + 1 > width) {
            window.pop_front();
        }
        let s = *window.front().expect("e itself is in the window");
        let score = output.start_dist[s] * output.end_dist[e];
        let better = match best {
            None => true,
            Some((b, bs, be)) => score > b || (score == b && (s, e) < (bs, be)),
        };
        if better {
            best = Some((score, s, e));
        }
    }
    best.map(|(_, s, e)| (s, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS_ID, PAD_ID, SEP_ID};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 12,
            max_len: 10,
            head_dropout_p: 0.5,
            active_tasks: TaskSet::ALL,
        }
    }

    fn input(ids: &[u32], segs: &[u8], pad_to: usize) -> TokenizedInput {
        let mut inp = TokenizedInput {
            token_ids: ids.to_vec(),
            segment_ids: segs.to_vec(),
            pad_mask: vec![false; ids.len()],
            response_char_spans: segs
                .iter()
                .enumerate()
                .map(|(i, &s)| (s == 1 && i + 1 < ids.len()).then_some((i, i + 1)))
                .collect(),
        };
        while inp.len() < pad_to {
            inp.token_ids.push(PAD_ID);
            inp.segment_ids.push(0);
            inp.pad_mask.push(true);
            inp.response_char_spans.push(None);
        }
        inp
    }

    fn sample() -> TokenizedInput {
        input(&[CLS_ID, 5, 6, SEP_ID, 7, 8, 9, SEP_ID], &[0, 0, 0, 0, 1, 1, 1, 1], 8)
    }

    #[test]
    fn reference_parameter_count() {
        let count = ModelConfig::reference().parameter_count();
        assert_eq!(count, 109_486_854);
        assert!((count as f64 / 1.10e8 - 1.0).abs() < 0.02);
    }

    #[test]
    fn closed_form_count_matches_tensors() {
        for cfg in [tiny_config(), ModelConfig::desk(57)] {
            let p = init_params(&cfg, 1);
            assert_eq!(p.num_params(), cfg.parameter_count());
            assert_eq!(p.names().len(), p.tensors().len());
            assert!(p.matches(&cfg));
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny_config();
        assert_eq!(init_params(&cfg, 7), init_params(&cfg, 7));
        assert_ne!(init_params(&cfg, 7), init_params(&cfg, 8));
        let p = init_params(&cfg, 7);
        assert!(p.layers[0].attn_norm_g.data.iter().all(|&g| g == 1.0));
        assert!(p.emb_norm_b.data.iter().all(|&b| b == 0.0));
        let mean = p.token_emb.data.iter().sum::<f64>() / p.token_emb.len() as f64;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.num_heads = 2;
        cfg.head_dropout_p = 1.0;
        assert!(cfg.validate().is_err());
        cfg.head_dropout_p = 0.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn output_shapes_and_normalization() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 3);
        let batch = vec![sample(), input(&[CLS_ID, 5, SEP_ID, 7, SEP_ID], &[0, 0, 0, 1, 1], 8)];
        let out = forward_eval(&p, &cfg, &batch).unwrap();
        assert_eq!(out.len(), 2);
        for (o, inp) in out.iter().zip(&batch) {
            assert_eq!(o.start_dist.len(), 8);
            assert_eq!(o.hidden_states.rows, 8);
            assert!((o.qp_prob.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((o.start_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((o.end_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..inp.len() {
                if !inp.is_response_token(i) {
                    assert_eq!(o.start_dist[i], 0.0);
                    assert_eq!(o.end_dist[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn padding_and_batch_order_invariance() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 3);
        let short = sample();
        let padded = input(&[CLS_ID, 5, 6, SEP_ID, 7, 8, 9, SEP_ID], &[0, 0, 0, 0, 1, 1, 1, 1], 10);
        let other = input(&[CLS_ID, 9, SEP_ID, 4, SEP_ID], &[0, 0, 0, 1, 1], 6);
        let a = forward_eval(&p, &cfg, &[short.clone(), other.clone()]).unwrap();
        let b = forward_eval(&p, &cfg, &[other, padded]).unwrap();
        assert_eq!(a[1], b[0]);
        for i in 0..2 {
            assert!((a[0].qp_prob[i] - b[1].qp_prob[i]).abs() < 1e-12);
        }
        for i in 0..8 {
            assert!((a[0].start_dist[i] - b[1].start_dist[i]).abs() < 1e-12);
        }
        assert_eq!(b[1].start_dist[8..], [0.0, 0.0]);
    }

    #[test]
    fn eval_deterministic_train_stochastic() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 3);
        let batch = vec![sample()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e1 = forward(&p, &cfg, &batch, Mode::Eval, &mut rng).unwrap();
        let e2 = forward(&p, &cfg, &batch, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e1, e2);
        let t1 = forward(&p, &cfg, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let t2 = forward(&p, &cfg, &batch, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(t1, t2);
        // dropout touches only the classification heads
        assert_eq!(t1[0].start_dist, e1[0].start_dist);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny_config();
        let p = init_params(&cfg, 3);
        let bad = input(&[CLS_ID, 99, SEP_ID, 7, SEP_ID], &[0, 0, 0, 1, 1], 5);
        assert!(matches!(
            forward_eval(&p, &cfg, &[bad]),
            Err(ModelError::TokenOutOfRange { id: 99, .. })
        ));
        let long = input(&[CLS_ID, 5, SEP_ID, 7, SEP_ID], &[0, 0, 0, 1, 1], 11);
        assert!(matches!(
            forward_eval(&p, &cfg, &[long]),
            Err(ModelError::TooLong { .. })
        ));
        let no_resp = input(&[CLS_ID, 5, SEP_ID], &[0, 0, 0], 3);
        assert!(matches!(
            forward_eval(&p, &cfg, &[no_resp]),
            Err(ModelError::NoResponseTokens)
        ));
    }

    #[test]
    fn non_finite_weights_reported_by_layer() {
        let cfg = tiny_config();
        let mut p = init_params(&cfg, 3);
        p.layers[0].ffn_out_w.data[0] = f64::NAN;
        match forward_eval(&p, &cfg, &[sample()]) {
            Err(ModelError::NonFinite(site)) => assert_eq!(site, "encoder layer 0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn dists(start: &[f64], end: &[f64]) -> ModelOutput {
        ModelOutput {
            qp_prob: [0.5, 0.5],
            rp_prob: [0.5, 0.5],
            start_dist: start.to_vec(),
            end_dist: end.to_vec(),
            hidden_states: Tensor::zeros(start.len(), 1),
        }
    }

    #[test]
    fn span_decoding_cases() {
        let inp = sample(); // response tokens at 4, 5, 6
        let o = dists(
            &[0., 0., 0., 0., 0.1, 0.8, 0.1, 0.],
            &[0., 0., 0., 0., 0.1, 0.1, 0.8, 0.],
        );
        assert_eq!(predict_span(&o, &inp, None), Some((5, 6)));
        assert_eq!(predict_span(&o, &inp, Some(1)), Some((5, 5)));
        // start peak after end peak
        let o = dists(
            &[0., 0., 0., 0., 0.1, 0.1, 0.8, 0.],
            &[0., 0., 0., 0., 0.8, 0.1, 0.1, 0.],
        );
        assert_eq!(predict_span(&o, &inp, None), Some((4, 4)));
        // uniform: ties resolve to the smallest pair
        let o = dists(&[0.2; 8], &[0.2; 8]);
        assert_eq!(predict_span(&o, &inp, None), Some((4, 4)));
        // mass on question positions is ignored
        let o = dists(
            &[0., 0.9, 0.05, 0., 0.02, 0.02, 0.01, 0.],
            &[0., 0.9, 0.05, 0., 0.01, 0.03, 0.01, 0.],
        );
        assert_eq!(predict_span(&o, &inp, None), Some((4, 5)));
    }
}
