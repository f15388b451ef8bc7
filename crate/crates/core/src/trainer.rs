//! Two-stage training with per-stage freezing.
//!
//! Stage 1 updates only the two bridge streams under the contrastive
//! objectives. Decoder pretraining fits the toy language model on captions
//! alone. Stage 2 updates the streams plus the prefix bridges under caption
//! cross-entropy while the decoder stays frozen.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::bridgenet::{bridge_forward_batch, embed_all, BridgeParams, ModalityMask};
use crate::data::{batch_iter, UtteranceSample};
use crate::decoder::{
    caption_ce_loss, decoder_forward, decoder_forward_slots, greedy_decode, token_accuracy, DecoderParams,
    PrefixBridges,
};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{stage1_loss, CognitionSet, EmotionLabel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{bind, collect_grads};
use crate::rng;
use crate::tensor::Tensor;

/// Losses above this abort a run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Named parameter groups; each stage freezes all but a subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    BridgeEmotion,
    BridgeCognition,
    Decoder,
    PrefixBridges,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::BridgeEmotion,
        ParamGroup::BridgeCognition,
        ParamGroup::Decoder,
        ParamGroup::PrefixBridges,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::BridgeEmotion => "bridgenet-emotion",
            ParamGroup::BridgeCognition => "bridgenet-cognition",
            ParamGroup::Decoder => "decoder",
            ParamGroup::PrefixBridges => "prefix-bridges",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    DecoderPretrain,
    One,
    Two,
}

impl Stage {
    pub fn trainable(self) -> &'static [ParamGroup] {
        match self {
            Stage::DecoderPretrain => &[ParamGroup::Decoder],
            Stage::One => &[ParamGroup::BridgeEmotion, ParamGroup::BridgeCognition],
            Stage::Two => &[
                ParamGroup::BridgeEmotion,
                ParamGroup::BridgeCognition,
                ParamGroup::PrefixBridges,
            ],
        }
    }

    pub fn frozen(self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !self.trainable().contains(g))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    /// Contrastive temperature (stage 1 only).
    pub tau: f64,
    pub seed: u64,
    pub mask: ModalityMask,
}

impl TrainConfig {
    /// Small-model preset: lr 1e-3, batch 16, 200 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            optim: AdamWConfig::DESK,
            tau: 0.1,
            seed: 0,
            mask: ModalityMask::ALL,
        }
    }

    /// The published setup: lr 1.3e-5, weight decay 1e-6, batch 64, 500 epochs.
    pub fn paper_faithful() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            optim: AdamWConfig::PAPER,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.mask.validate()?;
        if self.batch_size < 2 {
            return config_err("batch_size", "must be >= 2");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return config_err("tau", "must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One row of the stage-1 curve. Epoch 0 is measured before any update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Row {
    pub epoch: usize,
    pub emotion: f64,
    pub cognition: f64,
    pub total: f64,
}

/// One row of a caption cross-entropy curve. Epoch 0 is measured before any update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionRow {
    pub epoch: usize,
    pub loss: f64,
}

/// Everything a run produces besides the updated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog<R> {
    pub curve: Vec<R>,
    pub optimizer: AdamW,
}

fn check_loss(step: u64, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

fn need_pairs(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(alloc::format!(
            "training needs at least 2 samples, got {n}"
        )));
    }
    Ok(())
}

fn stage1_batch(
    g: &mut Graph,
    p: &BridgeParams<Var>,
    samples: &[&UtteranceSample],
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<crate::losses::Stage1Loss> {
    let feats: Vec<&[Tensor; 3]> = idx.iter().map(|&i| &samples[i].features).collect();
    let emo: Vec<EmotionLabel> = idx.iter().map(|&i| samples[i].emotion).collect();
    let cog: Vec<CognitionSet> = idx.iter().map(|&i| samples[i].cognition).collect();
    let (h_e, h_c) = bridge_forward_batch(g, p, &feats, cfg.mask)?;
    stage1_loss(g, h_e, &emo, h_c, &cog, cfg.tau)
}

/// Mean stage-1 losses over unshuffled batches, without updating anything.
pub fn evaluate_stage1(params: &BridgeParams, samples: &[&UtteranceSample], cfg: &TrainConfig) -> Result<Stage1Row> {
    cfg.validate()?;
    need_pairs(samples.len())?;
    let batches = batch_iter(samples.len(), cfg.batch_size, cfg.seed, 0, false)?;
    let mut sums = [0.0; 3];
    for idx in &batches {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let l = stage1_batch(&mut g, &p, samples, idx, cfg)?;
        sums[0] += g.value(l.emotion).get(0, 0);
        sums[1] += g.value(l.cognition).get(0, 0);
        sums[2] += g.value(l.total).get(0, 0);
    }
    let n = batches.len() as f64;
    Ok(Stage1Row {
        epoch: 0,
        emotion: sums[0] / n,
        cognition: sums[1] / n,
        total: sums[2] / n,
    })
}

/// Contrastive training of both bridge streams.
///
/// Each later row holds the mean batch losses seen during that epoch.
pub fn train_stage1(
    params: &mut BridgeParams,
    samples: &[&UtteranceSample],
    cfg: &TrainConfig,
) -> Result<RunLog<Stage1Row>> {
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(evaluate_stage1(params, samples, cfg)?);
    check_loss(0, curve[0].total)?;
    let mut opt = AdamW::new(cfg.optim)?;
    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(samples.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let mut sums = [0.0; 3];
        for idx in &batches {
            let mut g = Graph::new();
            let p = bind(&mut g, &*params, true);
            let l = stage1_batch(&mut g, &p, samples, idx, cfg)?;
            let total = g.value(l.total).get(0, 0);
            check_loss(opt.steps() + 1, total)?;
            sums[0] += g.value(l.emotion).get(0, 0);
            sums[1] += g.value(l.cognition).get(0, 0);
            sums[2] += total;
            g.backward(l.total)?;
            let mut grads = BTreeMap::new();
            collect_grads(&g, &p, "", &mut grads);
            opt.begin_step(&grads)?;
            opt.apply(params, "", &grads);
        }
        let n = batches.len() as f64;
        curve.push(Stage1Row {
            epoch,
            emotion: sums[0] / n,
            cognition: sums[1] / n,
            total: sums[2] / n,
        });
    }
    Ok(RunLog { curve, optimizer: opt })
}

/// Fixed random prefix codes used while pretraining the decoder.
///
/// A caption is cut after its first `.`; the first slot receives the sum of
/// per-token codes of the first sentence, the second slot those of the rest.
/// The codes are a deterministic function of the caption text, so the
/// decoder learns to read its prefix without ever seeing a label.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCodebook {
    pub first: Tensor,
    pub rest: Tensor,
}

/// Per-draw jitter added to pretraining prefix codes, relative to code scale.
pub const CODE_JITTER: f64 = 0.1;

impl PrefixCodebook {
    pub fn new(vocab_size: usize, d_model: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "decoder.codebook", 0);
        let mut draw = || {
            let data = (0..vocab_size * d_model)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    0.5 * z
                })
                .collect();
            Tensor::new(vocab_size, d_model, data).expect("shape")
        };
        let first = draw();
        let rest = draw();
        Self { first, rest }
    }

    /// The two prefix slots for a caption (EOS and PAD contribute nothing).
    pub fn slots(&self, caption: &[usize], dot: Option<usize>) -> (Tensor, Tensor) {
        let d = self.first.cols();
        let mut a = Tensor::zeros(1, d);
        let mut b = Tensor::zeros(1, d);
        let split = dot
            .and_then(|dot| caption.iter().position(|&t| t == dot))
            .map_or(caption.len(), |p| p + 1);
        for (i, &t) in caption.iter().enumerate() {
            if t == crate::decoder::EOS || t == crate::decoder::PAD {
                continue;
            }
            let (table, dst) = if i < split {
                (&self.first, &mut a)
            } else {
                (&self.rest, &mut b)
            };
            for (o, v) in dst.data_mut().iter_mut().zip(table.row(t)) {
                *o += v;
            }
        }
        (a, b)
    }
}

fn jitter(t: &Tensor, r: &mut rng::Rng) -> Tensor {
    let mut out = t.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(&mut *r);
        *v += 0.5 * CODE_JITTER * z;
    }
    out
}

/// Language-model pretraining of the toy decoder on a caption corpus.
///
/// `dot` is the sentence separator used to split a caption into the two
/// prefix slots. `cfg.tau` and `cfg.mask` are ignored.
pub fn pretrain_decoder(
    dec: &mut DecoderParams,
    codebook: &PrefixCodebook,
    captions: &[Vec<usize>],
    prompt: &[usize],
    dot: Option<usize>,
    cfg: &TrainConfig,
) -> Result<RunLog<CaptionRow>> {
    cfg.validate()?;
    need_pairs(captions.len())?;
    let codes: Vec<(Tensor, Tensor)> = captions.iter().map(|c| codebook.slots(c, dot)).collect();
    let batch_loss =
        |g: &mut Graph, p: &DecoderParams<Var>, idx: &[usize], noise: Option<&mut rng::Rng>| -> Result<Var> {
            let mut terms = Vec::with_capacity(idx.len());
            let mut noise = noise;
            for &i in idx {
                let (a, b) = match noise.as_deref_mut() {
                    Some(r) => (jitter(&codes[i].0, r), jitter(&codes[i].1, r)),
                    None => codes[i].clone(),
                };
                let a = g.constant(a);
                let b = g.constant(b);
                let logits = decoder_forward_slots(g, a, b, prompt, &captions[i], p)?;
                terms.push(caption_ce_loss(g, logits, &captions[i])?);
            }
            mean_of(g, &terms)
        };

    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let eval = batch_iter(captions.len(), cfg.batch_size, cfg.seed, 0, false)?;
    let mut sum = 0.0;
    for idx in &eval {
        let mut g = Graph::new();
        let p = bind(&mut g, &*dec, false);
        let l = batch_loss(&mut g, &p, idx, None)?;
        sum += g.value(l).get(0, 0);
    }
    curve.push(CaptionRow {
        epoch: 0,
        loss: sum / eval.len() as f64,
    });
    check_loss(0, curve[0].loss)?;

    let mut opt = AdamW::new(cfg.optim)?;
    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(captions.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let mut r = rng::stream(cfg.seed, "decoder.jitter", epoch as u64);
        let mut sum = 0.0;
        for idx in &batches {
            let mut g = Graph::new();
            let p = bind(&mut g, &*dec, true);
            let l = batch_loss(&mut g, &p, idx, Some(&mut r))?;
            let v = g.value(l).get(0, 0);
            check_loss(opt.steps() + 1, v)?;
            sum += v;
            g.backward(l)?;
            let mut grads = BTreeMap::new();
            collect_grads(&g, &p, "", &mut grads);
            opt.begin_step(&grads)?;
            opt.apply(dec, "", &grads);
        }
        curve.push(CaptionRow {
            epoch,
            loss: sum / batches.len() as f64,
        });
    }
    Ok(RunLog { curve, optimizer: opt })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let stacked = g.concat_rows(terms)?;
    let total = g.sum(stacked)?;
    g.scale(total, 1.0 / terms.len() as f64)
}

fn stage2_batch(
    g: &mut Graph,
    bridge: &BridgeParams<Var>,
    prefix: &PrefixBridges<Var>,
    dec: &DecoderParams<Var>,
    samples: &[&UtteranceSample],
    idx: &[usize],
    prompt: &[usize],
    mask: ModalityMask,
) -> Result<Var> {
    let feats: Vec<&[Tensor; 3]> = idx.iter().map(|&i| &samples[i].features).collect();
    let (h_e, h_c) = bridge_forward_batch(g, bridge, &feats, mask)?;
    let mut terms = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        let e = g.slice_rows(h_e, row, 1)?;
        let c = g.slice_rows(h_c, row, 1)?;
        let logits = decoder_forward(g, e, c, prompt, &samples[i].caption, dec, prefix)?;
        terms.push(caption_ce_loss(g, logits, &samples[i].caption)?);
    }
    mean_of(g, &terms)
}

/// Mean caption cross-entropy over unshuffled batches.
pub fn evaluate_stage2(
    bridge: &BridgeParams,
    prefix: &PrefixBridges,
    dec: &DecoderParams,
    samples: &[&UtteranceSample],
    prompt: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    need_pairs(samples.len())?;
    let batches = batch_iter(samples.len(), cfg.batch_size, cfg.seed, 0, false)?;
    let mut sum = 0.0;
    for idx in &batches {
        let mut g = Graph::new();
        let b = bind(&mut g, bridge, false);
        let pb = bind(&mut g, prefix, false);
        let d = bind(&mut g, dec, false);
        let l = stage2_batch(&mut g, &b, &pb, &d, samples, idx, prompt, cfg.mask)?;
        sum += g.value(l).get(0, 0);
    }
    Ok(sum / batches.len() as f64)
}

/// Caption alignment: bridge streams and prefix bridges learn, the decoder is read-only.
pub fn train_stage2(
    bridge: &mut BridgeParams,
    prefix: &mut PrefixBridges,
    dec: &DecoderParams,
    samples: &[&UtteranceSample],
    prompt: &[usize],
    cfg: &TrainConfig,
) -> Result<RunLog<CaptionRow>> {
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(CaptionRow {
        epoch: 0,
        loss: evaluate_stage2(bridge, prefix, dec, samples, prompt, cfg)?,
    });
    check_loss(0, curve[0].loss)?;
    let mut opt = AdamW::new(cfg.optim)?;
    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(samples.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let mut sum = 0.0;
        for idx in &batches {
            let mut g = Graph::new();
            let b = bind(&mut g, &*bridge, true);
            let pb = bind(&mut g, &*prefix, true);
            let d = bind(&mut g, dec, false);
            let l = stage2_batch(&mut g, &b, &pb, &d, samples, idx, prompt, cfg.mask)?;
            let v = g.value(l).get(0, 0);
            check_loss(opt.steps() + 1, v)?;
            sum += v;
            g.backward(l)?;
            let mut grads = BTreeMap::new();
            collect_grads(&g, &b, "", &mut grads);
            collect_grads(&g, &pb, "prefix", &mut grads);
            opt.begin_step(&grads)?;
            opt.apply(bridge, "", &grads);
            opt.apply(prefix, "prefix", &grads);
        }
        curve.push(CaptionRow {
            epoch,
            loss: sum / batches.len() as f64,
        });
    }
    Ok(RunLog { curve, optimizer: opt })
}

/// Greedy captions for every sample, in order.
pub fn generate_captions(
    bridge: &BridgeParams,
    prefix: &PrefixBridges,
    dec: &DecoderParams,
    samples: &[&UtteranceSample],
    prompt: &[usize],
    mask: ModalityMask,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let feats: Vec<&[Tensor; 3]> = samples.iter().map(|s| &s.features).collect();
    let (h_e, h_c) = embed_all(&feats, bridge, mask)?;
    (0..samples.len())
        .map(|i| {
            let e = Tensor::row_vector(h_e.row(i).to_vec());
            let c = Tensor::row_vector(h_c.row(i).to_vec());
            greedy_decode(&e, &c, prompt, dec, prefix, max_len)
        })
        .collect()
}

/// Corpus token accuracy: matched gold positions over all gold positions.
pub fn corpus_token_accuracy(generated: &[Vec<usize>], gold: &[&[usize]]) -> f64 {
    let (mut hits, mut total) = (0, 0);
    for (g, r) in generated.iter().zip(gold) {
        let (h, n) = token_accuracy(g, r);
        hits += h;
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Parameter-name to group lookup for a flat checkpoint map.
pub fn group_of(name: &str) -> Option<ParamGroup> {
    let head = name.split('.').next()?;
    match head {
        "emotion" => Some(ParamGroup::BridgeEmotion),
        "cognition" => Some(ParamGroup::BridgeCognition),
        "decoder" => Some(ParamGroup::Decoder),
        "prefix" => Some(ParamGroup::PrefixBridges),
        _ => None,
    }
}

/// Little-endian bytes of every tensor in a group, in name order.
pub fn group_bytes(named: &BTreeMap<String, Tensor>, group: ParamGroup) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in named {
        if group_of(name) == Some(group) {
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}
