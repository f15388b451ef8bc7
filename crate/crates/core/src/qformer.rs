//! Single-head query transformer for one modality.
//!
//! A bank of learnable queries self-attends, cross-attends to the projected
//! modality sequence and passes through a two-layer feed-forward block.
//! There is no residual path and no normalization; the output always has
//! `l_q` rows regardless of the input sequence length.

use alloc::format;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{param_block, uniform_init};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub fn short(self) -> char {
        match self {
            Modality::Video => 'v',
            Modality::Audio => 'a',
            Modality::Text => 't',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QFormerDims {
    /// Number of query tokens.
    pub l_q: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Input feature width of the modality.
    pub d_m: usize,
    /// FFN hidden width (the embedding width of the owning stream).
    pub d_hidden: usize,
    /// FFN output width (`d_hidden / 3`).
    pub d_out: usize,
}

param_block! {
    /// Learnable tensors of one Q-former.
    ///
    /// `w_q`, `w_k`, `w_v` act in query self-attention; `w_cq`, `w_ck`,
    /// `w_cv` in cross-attention; `w_m` projects the modality features.
    pub struct QFormerParams {
        query,
        w_q,
        w_k,
        w_v,
        w_m,
        w_cq,
        w_ck,
        w_cv,
        w_1,
        b_1,
        w_2,
        b_2,
    }
}

impl QFormerParams {
    pub fn init(dims: QFormerDims, rng: &mut Rng) -> Self {
        let d = dims;
        Self {
            query: uniform_init(rng, d.l_q, d.d_q, d.d_q),
            w_q: uniform_init(rng, d.d_q, d.d_k, d.d_q),
            w_k: uniform_init(rng, d.d_q, d.d_k, d.d_q),
            w_v: uniform_init(rng, d.d_q, d.d_v, d.d_q),
            w_m: uniform_init(rng, d.d_m, d.d_q, d.d_m),
            w_cq: uniform_init(rng, d.d_v, d.d_k, d.d_v),
            w_ck: uniform_init(rng, d.d_q, d.d_k, d.d_q),
            w_cv: uniform_init(rng, d.d_q, d.d_v, d.d_q),
            w_1: uniform_init(rng, d.d_v, d.d_hidden, d.d_v),
            b_1: Tensor::zeros(1, d.d_hidden),
            w_2: uniform_init(rng, d.d_hidden, d.d_out, d.d_hidden),
            b_2: Tensor::zeros(1, d.d_out),
        }
    }

    pub fn zeros(dims: QFormerDims) -> Self {
        let d = dims;
        Self {
            query: Tensor::zeros(d.l_q, d.d_q),
            w_q: Tensor::zeros(d.d_q, d.d_k),
            w_k: Tensor::zeros(d.d_q, d.d_k),
            w_v: Tensor::zeros(d.d_q, d.d_v),
            w_m: Tensor::zeros(d.d_m, d.d_q),
            w_cq: Tensor::zeros(d.d_v, d.d_k),
            w_ck: Tensor::zeros(d.d_q, d.d_k),
            w_cv: Tensor::zeros(d.d_q, d.d_v),
            w_1: Tensor::zeros(d.d_v, d.d_hidden),
            b_1: Tensor::zeros(1, d.d_hidden),
            w_2: Tensor::zeros(d.d_hidden, d.d_out),
            b_2: Tensor::zeros(1, d.d_out),
        }
    }
}

/// `H' = H W_m`.
pub fn modality_project(g: &mut Graph, features: Var, p: &QFormerParams<Var>) -> Result<Var> {
    g.matmul(features, p.w_m)
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d_k)) v`.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d_k = g.shape(q).1;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let weights = g.row_softmax(scores, 1.0 / libm::sqrt(d_k as f64))?;
    g.matmul(weights, v)
}

/// `Q' = softmax(Q W_q (Q W_k)^T / sqrt(d_k)) Q W_v`.
///
/// Depends only on parameters, so a batch computes it once per stream.
pub fn query_self_attention(g: &mut Graph, p: &QFormerParams<Var>) -> Result<Var> {
    let q = g.matmul(p.query, p.w_q)?;
    let k = g.matmul(p.query, p.w_k)?;
    let v = g.matmul(p.query, p.w_v)?;
    attend(g, q, k, v)
}

/// `Z = softmax(Q' W'_q (H' W'_k)^T / sqrt(d_k)) H' W'_v`.
pub fn query_cross_attention(g: &mut Graph, q_prime: Var, h_prime: Var, p: &QFormerParams<Var>) -> Result<Var> {
    if g.shape(h_prime).0 == 0 {
        return shape_err("query_cross_attention", "empty modality sequence".into());
    }
    let q = g.matmul(q_prime, p.w_cq)?;
    let k = g.matmul(h_prime, p.w_ck)?;
    let v = g.matmul(h_prime, p.w_cv)?;
    attend(g, q, k, v)
}

/// `Z' = ReLU(Z W_1 + b_1) W_2 + b_2`.
pub fn query_ffn(g: &mut Graph, z: Var, p: &QFormerParams<Var>) -> Result<Var> {
    let hidden = g.matmul(z, p.w_1)?;
    let hidden = g.add_row(hidden, p.b_1)?;
    let hidden = g.relu(hidden)?;
    let out = g.matmul(hidden, p.w_2)?;
    g.add_row(out, p.b_2)
}

/// Project, cross-attend and apply the FFN given a precomputed `Q'`.
pub fn qformer_apply(g: &mut Graph, features: Var, q_prime: Var, p: &QFormerParams<Var>) -> Result<Var> {
    let (w_rows, _) = g.shape(p.w_m);
    let (t, d_m) = g.shape(features);
    if d_m != w_rows {
        return shape_err(
            "modality_project",
            format!("features are {t}x{d_m}, projection expects width {w_rows}"),
        );
    }
    let h_prime = modality_project(g, features, p)?;
    let z = query_cross_attention(g, q_prime, h_prime, p)?;
    query_ffn(g, z, p)
}

/// Full chain for one modality.
pub fn qformer_modality(g: &mut Graph, features: Var, p: &QFormerParams<Var>) -> Result<Var> {
    let q_prime = query_self_attention(g, p)?;
    qformer_apply(g, features, q_prime, p)
}

/// Runs each modality through its own Q-former: returns `(Z'_v, Z'_a, Z'_t)`.
pub fn qformer_forward(g: &mut Graph, features: [Var; 3], params: [&QFormerParams<Var>; 3]) -> Result<[Var; 3]> {
    let v = qformer_modality(g, features[0], params[0])?;
    let a = qformer_modality(g, features[1], params[1])?;
    let t = qformer_modality(g, features[2], params[2])?;
    Ok([v, a, t])
}
