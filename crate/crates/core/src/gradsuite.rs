//! The full finite-difference suite: every graph op on its own, then the
//! composed Q-former, bridge, both contrastive losses and the decoder with
//! caption cross-entropy, all at toy sizes (l_q = 4, width 8, batch 6).

use alloc::vec::Vec;

use rand::Rng as _;

use crate::bridgenet::{bridge_forward_batch, BridgeConfig, BridgeParams, ModalityMask};
use crate::decoder::{caption_ce_loss, decoder_forward, DecoderConfig, DecoderParams, PrefixBridges, EOS};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::losses::{
    cognition_contrastive_loss, emotion_contrastive_loss, stage1_loss, CognitionCategory as C, CognitionSet,
    EmotionLabel,
};
use crate::params::ParamTree;
use crate::qformer::{qformer_modality, Modality, QFormerDims, QFormerParams};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Relative-error bound each check must stay under.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const TOY_BATCH: usize = 6;

/// Multiplier on the default init for the composed checks. At the default
/// scale some attention-path gradients are ~1e-8, where central-difference
/// roundoff (~1e-11) alone exceeds the relative tolerance.
pub const TOY_INIT_GAIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteEntry {
    /// Op or component name.
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self, tol: f64) -> bool {
        self.report.max_rel_error < tol
    }
}

pub fn toy_bridge_config() -> BridgeConfig {
    BridgeConfig {
        l_q: 4,
        d_q: 8,
        d_k: 8,
        d_v: 8,
        d_e: 12,
        d_c: 12,
        modality_dims: [8, 8, 8],
    }
}

fn rand_t(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Entries bounded away from zero, so kinks stay outside the stencil.
fn rand_away(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = r.random_range(0.1..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

fn flatten<P: ParamTree<Tensor>>(tree: &P, out: &mut Vec<Tensor>) {
    tree.visit("", &mut |_, t| out.push(t.clone()));
}

/// Rebuilds `tree` over consecutive vars, starting at `*at`.
fn rebind<P: ParamTree<Tensor>>(tree: &P, vars: &[Var], at: &mut usize) -> P::Mapped<Var> {
    tree.try_map("", &mut |_, _| {
        let v = vars[*at];
        *at += 1;
        Ok(v)
    })
    .expect("infallible")
}

fn reduce(g: &mut Graph, v: Var, w: &Tensor) -> Result<Var> {
    g.weighted_sum(v, w.clone())
}

type Check = (
    &'static str,
    Vec<Tensor>,
    alloc::boxed::Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
);

fn op_checks(r: &mut Rng) -> Vec<Check> {
    use alloc::boxed::Box;
    let mut out: Vec<Check> = Vec::new();
    let w34 = rand_t(r, 3, 4);
    let w35 = rand_t(r, 3, 5);

    let w = w35.clone();
    out.push((
        "matmul",
        alloc::vec![rand_t(r, 3, 4), rand_t(r, 4, 5)],
        Box::new(move |g, p| {
            let m = g.matmul(p[0], p[1])?;
            reduce(g, m, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "add",
        alloc::vec![rand_t(r, 3, 4), rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.add(p[0], p[1])?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "add_row",
        alloc::vec![rand_t(r, 3, 4), rand_t(r, 1, 4)],
        Box::new(move |g, p| {
            let s = g.add_row(p[0], p[1])?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "scale",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.scale(p[0], -1.7)?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "relu",
        alloc::vec![rand_away(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.relu(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "row_softmax",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.row_softmax(p[0], 0.7)?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 4, 4);
    out.push((
        "causal_row_softmax",
        alloc::vec![rand_t(r, 4, 4)],
        Box::new(move |g, p| {
            let s = g.causal_row_softmax(p[0], 1.3)?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "l2_normalize_rows",
        alloc::vec![rand_away(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.l2_normalize_rows(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 1, 4);
    out.push((
        "mean_pool_rows",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.mean_pool_rows(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 3, 6);
    out.push((
        "concat_cols",
        alloc::vec![rand_t(r, 3, 2), rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.concat_cols(&[p[0], p[1]])?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 5, 4);
    out.push((
        "concat_rows",
        alloc::vec![rand_t(r, 2, 4), rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.concat_rows(&[p[0], p[1]])?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 4, 3);
    out.push((
        "transpose",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.transpose(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "exp",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.exp(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    let pos = rand_t(r, 3, 4).map(|v| 0.5 + v.abs());
    out.push((
        "log",
        alloc::vec![pos],
        Box::new(move |g, p| {
            let s = g.log(p[0])?;
            reduce(g, s, &w)
        }),
    ));
    out.push((
        "sum",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(|g, p| {
            let e = g.exp(p[0])?;
            g.sum(e)
        }),
    ));
    let w = w34.clone();
    out.push((
        "weighted_sum",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| reduce(g, p[0], &w)),
    ));
    let w = w34.clone();
    let k = rand_t(r, 3, 4);
    out.push((
        "mul_const",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let s = g.mul_const(p[0], k.clone())?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 3, 1);
    let mut lw = rand_t(r, 3, 4);
    lw.set(0, 1, f64::NEG_INFINITY);
    lw.set(2, 3, f64::NEG_INFINITY);
    out.push((
        "logsumexp_rows",
        alloc::vec![rand_t(r, 3, 4)],
        Box::new(move |g, p| {
            let a = g.logsumexp_rows(p[0], lw.clone(), true)?;
            let b = g.logsumexp_rows(p[0], lw.clone(), false)?;
            let s = g.add(a, b)?;
            reduce(g, s, &w)
        }),
    ));
    let w = w34.clone();
    out.push((
        "gather_rows",
        alloc::vec![rand_t(r, 5, 4)],
        Box::new(move |g, p| {
            let s = g.gather_rows(p[0], &[4, 2, 2])?;
            reduce(g, s, &w)
        }),
    ));
    let w = rand_t(r, 2, 4);
    out.push((
        "slice_rows",
        alloc::vec![rand_t(r, 5, 4)],
        Box::new(move |g, p| {
            let s = g.slice_rows(p[0], 1, 2)?;
            reduce(g, s, &w)
        }),
    ));
    out.push((
        "cross_entropy",
        alloc::vec![rand_t(r, 4, 5)],
        Box::new(|g, p| g.cross_entropy(p[0], &[Some(1), None, Some(4), Some(0)])),
    ));
    out
}

fn toy_labels() -> (Vec<EmotionLabel>, Vec<CognitionSet>) {
    use EmotionLabel::*;
    let emo = alloc::vec![Negative, Negative, Neutral, Positive, Positive, Positive];
    let cog = alloc::vec![
        CognitionSet::from_categories(&[C::Memory]),
        CognitionSet::from_categories(&[C::Memory, C::Language]),
        CognitionSet::EMPTY,
        CognitionSet::from_categories(&[C::Attention]),
        CognitionSet::from_categories(&[C::Orientation, C::Attention]),
        CognitionSet::from_categories(&[C::Language]),
    ];
    (emo, cog)
}

fn component_checks(r: &mut Rng, seed: u64) -> Vec<Check> {
    use alloc::boxed::Box;
    let mut out: Vec<Check> = Vec::new();
    let cfg = toy_bridge_config();
    let mask = ModalityMask::ALL;

    // One Q-former, features included as inputs.
    let dims = QFormerDims {
        l_q: 4,
        d_q: 8,
        d_k: 8,
        d_v: 8,
        d_m: 8,
        d_hidden: 12,
        d_out: 4,
    };
    let mut qp = QFormerParams::init(dims, r);
    qp.visit_mut("", &mut |_, t| *t = t.scale(TOY_INIT_GAIN));
    let mut tensors = alloc::vec![rand_away(r, 5, 8)];
    flatten(&qp, &mut tensors);
    let w = rand_t(r, 4, 4);
    out.push((
        "qformer",
        tensors,
        Box::new(move |g, p| {
            let mut at = 1;
            let b = rebind(&qp, p, &mut at);
            let z = qformer_modality(g, p[0], &b)?;
            reduce(g, z, &w)
        }),
    ));

    // Both streams over a batch of six utterances.
    let mut bp = BridgeParams::init(&cfg, seed).expect("toy config");
    bp.visit_mut("", &mut |_, t| *t = t.scale(TOY_INIT_GAIN));
    let feats: Vec<[Tensor; 3]> = (0..TOY_BATCH)
        .map(|i| {
            let t = [5 + i % 3, 7, 3 + i % 2];
            Modality::ALL.map(|m| rand_away(r, t[m.index()], cfg.modality_dims[m.index()]))
        })
        .collect();
    let mut tensors = Vec::new();
    flatten(&bp, &mut tensors);
    let (we, wc) = (rand_t(r, TOY_BATCH, cfg.d_e), rand_t(r, TOY_BATCH, cfg.d_c));
    out.push((
        "bridgenet",
        tensors,
        Box::new(move |g, p| {
            let b = rebind(&bp, p, &mut 0);
            let refs: Vec<&[Tensor; 3]> = feats.iter().collect();
            let (he, hc) = bridge_forward_batch(g, &b, &refs, mask)?;
            let a = reduce(g, he, &we)?;
            let c = reduce(g, hc, &wc)?;
            g.add(a, c)
        }),
    ));

    let (emo, cog) = toy_labels();
    let e2 = emo.clone();
    out.push((
        "emotion_loss",
        alloc::vec![rand_away(r, TOY_BATCH, 8)],
        Box::new(move |g, p| {
            let h = g.l2_normalize_rows(p[0])?;
            emotion_contrastive_loss(g, h, &e2, 0.5)
        }),
    ));
    let c2 = cog.clone();
    out.push((
        "cognition_loss",
        alloc::vec![rand_away(r, TOY_BATCH, 8)],
        Box::new(move |g, p| {
            let h = g.l2_normalize_rows(p[0])?;
            cognition_contrastive_loss(g, h, &c2, 0.5)
        }),
    ));
    out.push((
        "stage1_loss",
        alloc::vec![rand_away(r, TOY_BATCH, 8), rand_away(r, TOY_BATCH, 8)],
        Box::new(move |g, p| {
            let he = g.l2_normalize_rows(p[0])?;
            let hc = g.l2_normalize_rows(p[1])?;
            Ok(stage1_loss(g, he, &emo, hc, &cog, 0.5)?.total)
        }),
    ));

    // Decoder with prefix bridges and caption cross-entropy.
    let dcfg = DecoderConfig {
        d_model: 8,
        d_ff: 16,
        max_len: 12,
    };
    let vocab = 8;
    let dec = DecoderParams::init(&dcfg, vocab, seed).expect("toy config");
    let pb = PrefixBridges::init(cfg.d_e, cfg.d_c, dcfg.d_model, seed);
    let mut tensors = alloc::vec![rand_away(r, 1, cfg.d_e), rand_away(r, 1, cfg.d_c)];
    flatten(&dec, &mut tensors);
    let n_dec = tensors.len();
    flatten(&pb, &mut tensors);
    out.push((
        "decoder_ce",
        tensors,
        Box::new(move |g, p| {
            let mut at = 2;
            let d = rebind(&dec, p, &mut at);
            debug_assert_eq!(at, n_dec);
            let b = rebind(&pb, p, &mut at);
            let targets = [4, 5, 2, 6, EOS];
            let logits = decoder_forward(g, p[0], p[1], &[3, 7], &targets, &d, &b)?;
            caption_ce_loss(g, logits, &targets)
        }),
    ));
    out
}

/// Runs every check with seeded toy inputs.
pub fn run_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut r = rng::stream(seed, "gradsuite", 0);
    let mut checks = op_checks(&mut r);
    checks.extend(component_checks(&mut r, seed));
    checks
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(|g, p| f(g, p), &params, opts)?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpKind;

    #[test]
    fn every_op_has_a_dedicated_check() {
        let mut r = rng::stream(0, "t", 0);
        let names: Vec<&str> = op_checks(&mut r).iter().map(|c| c.0).collect();
        for k in OpKind::ALL {
            if k != OpKind::Leaf {
                assert!(names.contains(&k.name()), "{} unchecked", k.name());
            }
        }
    }
}
