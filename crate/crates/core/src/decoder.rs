//! Frozen toy autoregressive decoder.
//!
//! One causal self-attention block with a feed-forward layer, both with
//! residual connections, over learned token and position embeddings. The
//! input sequence is `[BOS, slot_e, slot_c, prompt.., targets[..n-1]]`
//! where the two slots are soft tokens: the bridge embeddings mapped into
//! the decoder width by trainable prefix bridges.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{bind, param_block, uniform_init};
use crate::rng;
use crate::tensor::Tensor;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

/// Bijective token/id table with reserved `<bos>`, `<eos>`, `<pad>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub const RESERVED: [&'static str; 3] = ["<bos>", "<eos>", "<pad>"];

    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return config_err("vocab", format!("needs at least 4 tokens, got {}", tokens.len()));
        }
        for (i, r) in Self::RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return config_err("vocab", format!("id {i} must be `{r}`, found `{}`", tokens[i]));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return config_err("vocab", format!("token {i} is empty or contains whitespace"));
            }
            if ids.insert(t.clone(), i).is_some() {
                return config_err("vocab", format!("duplicate token `{t}`"));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Vocabulary of the synthetic caption templates.
    pub fn caption_default() -> Self {
        let words = [
            "<bos>",
            "<eos>",
            "<pad>",
            "emotion",
            "negative",
            "neutral",
            "positive",
            "cognition",
            "orientation",
            "attention",
            "memory",
            "language",
            "none",
            ".",
            "describe",
            "state",
        ];
        Self::new(words.iter().map(|w| w.to_string()).collect()).expect("valid default vocab")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-tokenizes `text`; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Contract(format!("token `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Space-joined tokens, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or("<unk>"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    /// Size of the positional table; bounds prefix plus caption length.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ff: 64,
            max_len: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return config_err(name, "must be >= 1");
            }
        }
        Ok(())
    }
}

param_block! {
    /// Decoder weights. Frozen after language-model pretraining.
    pub struct DecoderParams {
        tok_emb,
        pos_emb,
        w_q,
        w_k,
        w_v,
        w_o,
        w_ff1,
        b_ff1,
        w_ff2,
        b_ff2,
        w_out,
        b_out,
    }
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init.decoder", 0);
        let (d, f, v) = (cfg.d_model, cfg.d_ff, vocab_size);
        Ok(Self {
            tok_emb: uniform_init(&mut r, v, d, 1),
            pos_emb: uniform_init(&mut r, cfg.max_len, d, d),
            w_q: uniform_init(&mut r, d, d, d),
            w_k: uniform_init(&mut r, d, d, d),
            w_v: uniform_init(&mut r, d, d, d),
            w_o: uniform_init(&mut r, d, d, d),
            w_ff1: uniform_init(&mut r, d, f, d),
            b_ff1: Tensor::zeros(1, f),
            w_ff2: uniform_init(&mut r, f, d, f),
            b_ff2: Tensor::zeros(1, d),
            w_out: uniform_init(&mut r, d, v, d),
            b_out: Tensor::zeros(1, v),
        })
    }

    pub fn zeros(cfg: &DecoderConfig, vocab_size: usize) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, vocab_size);
        Self {
            tok_emb: Tensor::zeros(v, d),
            pos_emb: Tensor::zeros(cfg.max_len, d),
            w_q: Tensor::zeros(d, d),
            w_k: Tensor::zeros(d, d),
            w_v: Tensor::zeros(d, d),
            w_o: Tensor::zeros(d, d),
            w_ff1: Tensor::zeros(d, f),
            b_ff1: Tensor::zeros(1, f),
            w_ff2: Tensor::zeros(f, d),
            b_ff2: Tensor::zeros(1, d),
            w_out: Tensor::zeros(d, v),
            b_out: Tensor::zeros(1, v),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.rows()
    }
}

param_block! {
    /// Affine maps from `h_e` / `h_c` into the decoder width. Trained in
    /// stage 2 together with the bridge streams.
    pub struct PrefixBridges { w_e, b_e, w_c, b_c }
}

impl PrefixBridges {
    pub fn init(d_e: usize, d_c: usize, d_model: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "init.prefix", 0);
        Self {
            w_e: uniform_init(&mut r, d_e, d_model, d_e),
            b_e: Tensor::zeros(1, d_model),
            w_c: uniform_init(&mut r, d_c, d_model, d_c),
            b_c: Tensor::zeros(1, d_model),
        }
    }
}

/// Number of leading positions before the first caption token is predicted.
pub fn prefix_len(prompt: &[usize]) -> usize {
    3 + prompt.len()
}

/// Teacher-forced logits (`targets.len() x |V|`) given the two soft tokens.
///
/// Row `t` depends only on the prefix and `targets[..t]`.
pub fn decoder_forward_slots(
    g: &mut Graph,
    slot_e: Var,
    slot_c: Var,
    prompt: &[usize],
    targets: &[usize],
    p: &DecoderParams<Var>,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract("decoder needs at least one target token".into()));
    }
    let prefix = prefix_len(prompt);
    let n = prefix + targets.len() - 1;
    let max = g.shape(p.pos_emb).0;
    if n > max {
        return Err(Error::Length { len: n, max });
    }
    let mut parts = Vec::with_capacity(5);
    parts.push(g.gather_rows(p.tok_emb, &[BOS])?);
    parts.push(slot_e);
    parts.push(slot_c);
    if !prompt.is_empty() {
        parts.push(g.gather_rows(p.tok_emb, prompt)?);
    }
    if targets.len() > 1 {
        parts.push(g.gather_rows(p.tok_emb, &targets[..targets.len() - 1])?);
    }
    let tokens = g.concat_rows(&parts)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(p.pos_emb, &positions)?;
    let x = g.add(tokens, pos)?;

    let d_model = g.shape(x).1;
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let att = g.causal_row_softmax(scores, 1.0 / libm::sqrt(d_model as f64))?;
    let mixed = g.matmul(att, v)?;
    let mixed = g.matmul(mixed, p.w_o)?;
    let h = g.add(x, mixed)?;

    let ff = g.matmul(h, p.w_ff1)?;
    let ff = g.add_row(ff, p.b_ff1)?;
    let ff = g.relu(ff)?;
    let ff = g.matmul(ff, p.w_ff2)?;
    let ff = g.add_row(ff, p.b_ff2)?;
    let h = g.add(h, ff)?;

    let read = g.slice_rows(h, prefix - 1, targets.len())?;
    let logits = g.matmul(read, p.w_out)?;
    g.add_row(logits, p.b_out)
}

/// Maps `(h_e, h_c)` through the prefix bridges into the two soft tokens.
pub fn prefix_slots(g: &mut Graph, h_e: Var, h_c: Var, bridges: &PrefixBridges<Var>) -> Result<(Var, Var)> {
    let e = g.matmul(h_e, bridges.w_e)?;
    let e = g.add_row(e, bridges.b_e)?;
    let c = g.matmul(h_c, bridges.w_c)?;
    let c = g.add_row(c, bridges.b_c)?;
    Ok((e, c))
}

/// Teacher-forced logits conditioned on bridge embeddings.
pub fn decoder_forward(
    g: &mut Graph,
    h_e: Var,
    h_c: Var,
    prompt: &[usize],
    targets: &[usize],
    dec: &DecoderParams<Var>,
    bridges: &PrefixBridges<Var>,
) -> Result<Var> {
    let (e, c) = prefix_slots(g, h_e, h_c, bridges)?;
    decoder_forward_slots(g, e, c, prompt, targets, dec)
}

/// Mean next-token cross-entropy over non-PAD targets.
pub fn caption_ce_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|&id| (id != PAD).then_some(id)).collect();
    g.cross_entropy(logits, &t)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy generation from two soft-token slots. Stops after emitting EOS,
/// after `max_len` tokens or when the positional table is exhausted.
pub fn greedy_decode_slots(
    slot_e: &Tensor,
    slot_c: &Tensor,
    prompt: &[usize],
    dec: &DecoderParams,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    let room = dec.max_len().saturating_sub(prefix_len(prompt) - 1);
    while out.len() < max_len.min(room) {
        let mut g = Graph::new();
        let p = bind(&mut g, dec, false);
        let e = g.constant(slot_e.clone());
        let c = g.constant(slot_c.clone());
        let mut targets = out.clone();
        targets.push(PAD);
        let logits = decoder_forward_slots(&mut g, e, c, prompt, &targets, &p)?;
        let next = argmax(g.value(logits).row(targets.len() - 1));
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Greedy caption for bridge embeddings.
pub fn greedy_decode(
    h_e: &Tensor,
    h_c: &Tensor,
    prompt: &[usize],
    dec: &DecoderParams,
    bridges: &PrefixBridges,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let b = bind(&mut g, bridges, false);
    let he = g.constant(h_e.clone());
    let hc = g.constant(h_c.clone());
    let (e, c) = prefix_slots(&mut g, he, hc, &b)?;
    let (se, sc) = (g.value(e).clone(), g.value(c).clone());
    greedy_decode_slots(&se, &sc, prompt, dec, max_len)
}

/// Fraction of gold positions reproduced exactly (gold includes EOS).
pub fn token_accuracy(generated: &[usize], gold: &[usize]) -> (usize, usize) {
    let hits = gold.iter().zip(generated).filter(|(a, b)| a == b).count();
    (hits, gold.len())
}
