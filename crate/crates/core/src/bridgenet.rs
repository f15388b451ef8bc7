//! Dual-stream bridge: an emotion stream and a cognition stream, each made
//! of three per-modality Q-formers followed by concat, affine projection,
//! mean pooling over queries and L2 normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{join, param_block, uniform_init, ParamTree};
use crate::qformer::{qformer_apply, query_self_attention, Modality, QFormerDims, QFormerParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BridgeConfig {
    pub l_q: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Emotion embedding width; must be divisible by 3.
    pub d_e: usize,
    /// Cognition embedding width; must be divisible by 3.
    pub d_c: usize,
    /// Input feature width per modality, in video/audio/text order.
    pub modality_dims: [usize; 3],
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            l_q: 8,
            d_q: 32,
            d_k: 32,
            d_v: 32,
            d_e: 48,
            d_c: 48,
            modality_dims: [24; 3],
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_q", self.l_q),
            ("d_q", self.d_q),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("d_c", self.d_c),
        ] {
            if v == 0 {
                return config_err(name, "must be >= 1");
            }
        }
        for (m, &d) in Modality::ALL.iter().zip(&self.modality_dims) {
            if d == 0 {
                return config_err(&format!("d_{}", m.name()), "must be >= 1");
            }
        }
        if !self.d_e.is_multiple_of(3) {
            return config_err("d_e", format!("{} is not divisible by 3", self.d_e));
        }
        if !self.d_c.is_multiple_of(3) {
            return config_err("d_c", format!("{} is not divisible by 3", self.d_c));
        }
        Ok(())
    }

    pub fn qformer_dims(&self, modality: Modality, width: usize) -> QFormerDims {
        QFormerDims {
            l_q: self.l_q,
            d_q: self.d_q,
            d_k: self.d_k,
            d_v: self.d_v,
            d_m: self.modality_dims[modality.index()],
            d_hidden: width,
            d_out: width / 3,
        }
    }
}

/// Which modalities feed the bridge. Disabled modalities contribute a
/// zero block to the fused concat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    pub video: bool,
    pub audio: bool,
    pub text: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl ModalityMask {
    pub const ALL: ModalityMask = ModalityMask {
        video: true,
        audio: true,
        text: true,
    };

    pub fn only(m: Modality) -> Self {
        Self {
            video: m == Modality::Video,
            audio: m == Modality::Audio,
            text: m == Modality::Text,
        }
    }

    pub fn enabled(&self, m: Modality) -> bool {
        match m {
            Modality::Video => self.video,
            Modality::Audio => self.audio,
            Modality::Text => self.text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.video || self.audio || self.text {
            Ok(())
        } else {
            Err(Error::Contract("modality mask disables every modality".into()))
        }
    }

    /// Parses a subset string such as `"vat"`, `"a"` or `"v,t"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mask = ModalityMask {
            video: false,
            audio: false,
            text: false,
        };
        for c in s.chars().filter(|c| !matches!(c, ',' | ' ')) {
            match c {
                'v' => mask.video = true,
                'a' => mask.audio = true,
                't' => mask.text = true,
                other => return config_err("modalities", format!("unknown modality `{other}`")),
            }
        }
        if mask.validate().is_err() {
            return config_err("modalities", "at least one of v, a, t is required");
        }
        Ok(mask)
    }

    pub fn label(&self) -> String {
        Modality::ALL
            .iter()
            .filter(|m| self.enabled(**m))
            .map(|m| m.short())
            .collect()
    }
}

param_block! {
    /// Post-concat projection `W_3`, `b_3` of one stream.
    pub struct FusionParams { w_3, b_3 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams<T = Tensor> {
    pub video: QFormerParams<T>,
    pub audio: QFormerParams<T>,
    pub text: QFormerParams<T>,
    pub fusion: FusionParams<T>,
}

impl<T> StreamParams<T> {
    pub fn modality(&self, m: Modality) -> &QFormerParams<T> {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

impl<T> ParamTree<T> for StreamParams<T> {
    type Mapped<U> = StreamParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.video.visit(&join(prefix, "video"), f);
        self.audio.visit(&join(prefix, "audio"), f);
        self.text.visit(&join(prefix, "text"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.video.visit_mut(&join(prefix, "video"), f);
        self.audio.visit_mut(&join(prefix, "audio"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }

    fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<StreamParams<U>> {
        Ok(StreamParams {
            video: self.video.try_map(&join(prefix, "video"), f)?,
            audio: self.audio.try_map(&join(prefix, "audio"), f)?,
            text: self.text.try_map(&join(prefix, "text"), f)?,
            fusion: self.fusion.try_map(&join(prefix, "fusion"), f)?,
        })
    }
}

impl StreamParams {
    /// Seeded init; `stream` names the RNG sub-stream (`"emotion"`, `"cognition"`).
    pub fn init(cfg: &BridgeConfig, width: usize, seed: u64, stream: &str) -> Self {
        let q = |m: Modality| {
            let mut r = rng::stream(seed, &format!("init.{stream}.{}", m.name()), 0);
            QFormerParams::init(cfg.qformer_dims(m, width), &mut r)
        };
        let (video, audio, text) = (q(Modality::Video), q(Modality::Audio), q(Modality::Text));
        let mut r = rng::stream(seed, &format!("init.{stream}.fusion"), 0);
        StreamParams {
            video,
            audio,
            text,
            fusion: FusionParams {
                w_3: uniform_init(&mut r, width, width, width),
                b_3: Tensor::zeros(1, width),
            },
        }
    }
}

/// Parameters of both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeParams<T = Tensor> {
    pub emotion: StreamParams<T>,
    pub cognition: StreamParams<T>,
}

impl<T> ParamTree<T> for BridgeParams<T> {
    type Mapped<U> = BridgeParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.emotion.visit(&join(prefix, "emotion"), f);
        self.cognition.visit(&join(prefix, "cognition"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.emotion.visit_mut(&join(prefix, "emotion"), f);
        self.cognition.visit_mut(&join(prefix, "cognition"), f);
    }

    fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<BridgeParams<U>> {
        Ok(BridgeParams {
            emotion: self.emotion.try_map(&join(prefix, "emotion"), f)?,
            cognition: self.cognition.try_map(&join(prefix, "cognition"), f)?,
        })
    }
}

impl BridgeParams {
    pub fn init(cfg: &BridgeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            emotion: StreamParams::init(cfg, cfg.d_e, seed, "emotion"),
            cognition: StreamParams::init(cfg, cfg.d_c, seed, "cognition"),
        })
    }
}

/// Unit-norm `(h_e, h_c)` for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeEmbeddings {
    pub h_e: Tensor,
    pub h_c: Tensor,
}

/// `normalize(mean_pool(concat(Z'_v, Z'_a, Z'_t) W_3 + b_3))`.
///
/// Masked modalities are replaced by zero blocks of the same shape.
pub fn fuse_and_pool(g: &mut Graph, z: [Var; 3], fusion: &FusionParams<Var>, mask: ModalityMask) -> Result<Var> {
    mask.validate()?;
    let shape = g.shape(z[0]);
    for (m, &zm) in Modality::ALL.iter().zip(&z) {
        if g.shape(zm) != shape {
            return Err(Error::Shape {
                op: "fuse_and_pool",
                detail: format!("{} block is {:?}, expected {:?}", m.name(), g.shape(zm), shape),
            });
        }
    }
    let mut blocks = [z[0]; 3];
    for (i, m) in Modality::ALL.iter().enumerate() {
        blocks[i] = if mask.enabled(*m) {
            z[i]
        } else {
            g.constant(Tensor::zeros(shape.0, shape.1))
        };
    }
    let cat = g.concat_cols(&blocks)?;
    let proj = g.matmul(cat, fusion.w_3)?;
    let proj = g.add_row(proj, fusion.b_3)?;
    let pooled = g.mean_pool_rows(proj)?;
    g.l2_normalize_rows(pooled)
}

/// Per-stream query self-attention outputs, shared across a batch.
#[derive(Clone, Copy, Debug)]
pub struct StreamQueries([Option<Var>; 3]);

impl StreamQueries {
    pub fn compute(g: &mut Graph, p: &StreamParams<Var>, mask: ModalityMask) -> Result<Self> {
        let mut out = [None; 3];
        for m in Modality::ALL {
            if mask.enabled(m) {
                out[m.index()] = Some(query_self_attention(g, p.modality(m))?);
            }
        }
        Ok(Self(out))
    }
}

/// Embeds one sample through one stream, returning a `1 x width` row.
pub fn stream_embed(
    g: &mut Graph,
    p: &StreamParams<Var>,
    queries: &StreamQueries,
    features: [Var; 3],
    mask: ModalityMask,
) -> Result<Var> {
    mask.validate()?;
    let (l_q, _) = g.shape(p.video.query);
    let (_, d_out) = g.shape(p.video.w_2);
    let mut z = [features[0]; 3];
    for m in Modality::ALL {
        z[m.index()] = match queries.0[m.index()] {
            Some(q_prime) if mask.enabled(m) => qformer_apply(g, features[m.index()], q_prime, p.modality(m))?,
            _ => g.constant(Tensor::zeros(l_q, d_out)),
        };
    }
    fuse_and_pool(g, z, &p.fusion, mask)
}

/// Graph-level batch forward: returns `(N x d_e, N x d_c)` embedding stacks.
pub fn bridge_forward_batch(
    g: &mut Graph,
    p: &BridgeParams<Var>,
    samples: &[&[Tensor; 3]],
    mask: ModalityMask,
) -> Result<(Var, Var)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let qe = StreamQueries::compute(g, &p.emotion, mask)?;
    let qc = StreamQueries::compute(g, &p.cognition, mask)?;
    let mut rows_e = Vec::with_capacity(samples.len());
    let mut rows_c = Vec::with_capacity(samples.len());
    for feats in samples {
        let fv = [
            g.constant(feats[0].clone()),
            g.constant(feats[1].clone()),
            g.constant(feats[2].clone()),
        ];
        rows_e.push(stream_embed(g, &p.emotion, &qe, fv, mask)?);
        rows_c.push(stream_embed(g, &p.cognition, &qc, fv, mask)?);
    }
    Ok((g.concat_rows(&rows_e)?, g.concat_rows(&rows_c)?))
}

/// Value-level forward of one utterance.
pub fn bridge_forward(features: &[Tensor; 3], params: &BridgeParams, mask: ModalityMask) -> Result<BridgeEmbeddings> {
    let mut g = Graph::new();
    let bound = crate::params::bind(&mut g, params, false);
    let (e, c) = bridge_forward_batch(&mut g, &bound, &[features], mask)?;
    Ok(BridgeEmbeddings {
        h_e: g.value(e).clone(),
        h_c: g.value(c).clone(),
    })
}

/// Embeds many utterances, returning `(N x d_e, N x d_c)` value matrices.
pub fn embed_all(features: &[&[Tensor; 3]], params: &BridgeParams, mask: ModalityMask) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = crate::params::bind(&mut g, params, false);
    let (e, c) = bridge_forward_batch(&mut g, &bound, features, mask)?;
    Ok((g.value(e).clone(), g.value(c).clone()))
}
