//! Stage-1 contrastive objectives.
//!
//! The emotion loss treats same-label pairs as positives (a supervised
//! contrastive term plus an explicit log-sum-exp push on negatives). The
//! cognition loss replaces the binary positive mask with Jaccard overlap
//! between multi-label sets.
//!
//! Anchors whose positive mass is empty are skipped in the pull term and
//! that term is averaged over the remaining anchors; the push term always
//! averages over all `N` anchors. Self-pairs never enter any sum.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionLabel {
    Negative,
    Neutral,
    Positive,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 3] = [EmotionLabel::Negative, EmotionLabel::Neutral, EmotionLabel::Positive];

    pub fn value(self) -> i8 {
        match self {
            EmotionLabel::Negative => -1,
            EmotionLabel::Neutral => 0,
            EmotionLabel::Positive => 1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            -1 => Some(EmotionLabel::Negative),
            0 => Some(EmotionLabel::Neutral),
            1 => Some(EmotionLabel::Positive),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Negative => "negative",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Positive => "positive",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CognitionCategory {
    Orientation,
    Attention,
    Memory,
    Language,
}

impl CognitionCategory {
    pub const ALL: [CognitionCategory; 4] = [
        CognitionCategory::Orientation,
        CognitionCategory::Attention,
        CognitionCategory::Memory,
        CognitionCategory::Language,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CognitionCategory::Orientation => "orientation",
            CognitionCategory::Attention => "attention",
            CognitionCategory::Memory => "memory",
            CognitionCategory::Language => "language",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Subset of the four cognition categories, possibly empty.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CognitionSet(u8);

impl CognitionSet {
    pub const EMPTY: CognitionSet = CognitionSet(0);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 16).then_some(CognitionSet(bits))
    }

    pub fn from_categories(cats: &[CognitionCategory]) -> Self {
        CognitionSet(cats.iter().fold(0, |acc, c| acc | c.bit()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, c: CognitionCategory) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn insert(&mut self, c: CognitionCategory) {
        self.0 |= c.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn categories(self) -> impl Iterator<Item = CognitionCategory> {
        CognitionCategory::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    /// Weight used by the cognition loss: 1 for two empty sets, 0 when
    /// exactly one is empty, intersection over union otherwise.
    pub fn jaccard(self, other: CognitionSet) -> f64 {
        match (self.is_empty(), other.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (self.0 & other.0).count_ones() as f64 / (self.0 | other.0).count_ones() as f64,
        }
    }
}

impl fmt::Debug for CognitionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.categories().map(|c| c.name())).finish()
    }
}

fn check_batch(n: usize, labels: usize, tau: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::Contract(format!("contrastive batch needs N >= 2, got {n}")));
    }
    if labels != n {
        return Err(Error::Contract(format!("{labels} labels for {n} embeddings")));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return config_err("tau", format!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// `S_ij = h_i . h_j / tau` for unit-norm rows.
pub fn similarity_matrix(g: &mut Graph, embeddings: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return config_err("tau", format!("temperature must be positive, got {tau}"));
    }
    let et = g.transpose(embeddings)?;
    let dots = g.matmul(embeddings, et)?;
    g.scale(dots, 1.0 / tau)
}

/// `M_ij = 1` iff labels match and `i != j`.
pub fn emotion_mask(labels: &[EmotionLabel]) -> Tensor {
    let n = labels.len();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

pub fn jaccard_weights(labels: &[CognitionSet]) -> Tensor {
    let n = labels.len();
    let mut w = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w.set(i, j, labels[i].jaccard(labels[j]));
        }
    }
    w
}

fn log_mask(n: usize, include: impl Fn(usize, usize) -> Option<f64>) -> Tensor {
    let mut t = Tensor::filled(n, n, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if let Some(w) = include(i, j) {
                t.set(i, j, w);
            }
        }
    }
    t
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(n, 1, values).expect("shape")
}

/// Label-matching contrastive loss over `N` unit-norm embedding rows.
pub fn emotion_contrastive_loss(g: &mut Graph, embeddings: Var, labels: &[EmotionLabel], tau: f64) -> Result<Var> {
    let n = g.shape(embeddings).0;
    check_batch(n, labels.len(), tau)?;
    let s = similarity_matrix(g, embeddings, tau)?;
    let mask = emotion_mask(labels);

    // Pull term: -(1/N_valid) sum_i (1/|P_i|) sum_{j in P_i} (S_ij - lse_{k != i} S_ik)
    let positives: Vec<usize> = (0..n)
        .map(|i| mask.row(i).iter().filter(|&&m| m > 0.0).count())
        .collect();
    let valid = positives.iter().filter(|&&p| p > 0).count();
    let mut pull_weights = Tensor::zeros(n, n);
    let mut lse_weights = Vec::with_capacity(n);
    for i in 0..n {
        if positives[i] == 0 {
            lse_weights.push(0.0);
            continue;
        }
        let w = 1.0 / (positives[i] as f64 * valid as f64);
        for j in 0..n {
            if mask.get(i, j) > 0.0 {
                pull_weights.set(i, j, -w);
            }
        }
        lse_weights.push(1.0 / valid as f64);
    }
    let lse_all = g.logsumexp_rows(s, log_mask(n, |i, j| (i != j).then_some(0.0)), false)?;
    let pull_s = g.weighted_sum(s, pull_weights)?;
    let pull_lse = g.weighted_sum(lse_all, column(lse_weights))?;
    let pull = g.add(pull_s, pull_lse)?;

    // Push term: (1/N) sum_i log(1 + sum_{j != i, M_ij = 0} exp S_ij)
    let neg = log_mask(n, |i, j| (i != j && mask.get(i, j) == 0.0).then_some(0.0));
    let push_rows = g.logsumexp_rows(s, neg, true)?;
    let push = g.weighted_sum(push_rows, Tensor::filled(n, 1, 1.0 / n as f64))?;
    g.add(pull, push)
}

/// Jaccard-weighted multi-label contrastive loss.
pub fn cognition_contrastive_loss(g: &mut Graph, embeddings: Var, labels: &[CognitionSet], tau: f64) -> Result<Var> {
    let n = g.shape(embeddings).0;
    check_batch(n, labels.len(), tau)?;
    let s = similarity_matrix(g, embeddings, tau)?;
    let w = jaccard_weights(labels);

    // Pull term: -(1/N_valid) sum_i [lse_j (S_ij + log W_ij) - lse_j S_ij], j != i
    let has_mass: Vec<bool> = (0..n).map(|i| (0..n).any(|j| j != i && w.get(i, j) > 0.0)).collect();
    let valid = has_mass.iter().filter(|&&b| b).count();
    let k = if valid > 0 { 1.0 / valid as f64 } else { 0.0 };
    let weighted = log_mask(n, |i, j| (i != j && w.get(i, j) > 0.0).then(|| libm::log(w.get(i, j))));
    let lse_weighted = g.logsumexp_rows(s, weighted, false)?;
    let lse_all = g.logsumexp_rows(s, log_mask(n, |i, j| (i != j).then_some(0.0)), false)?;
    let pos_w: Vec<f64> = has_mass.iter().map(|&b| if b { -k } else { 0.0 }).collect();
    let neg_w: Vec<f64> = has_mass.iter().map(|&b| if b { k } else { 0.0 }).collect();
    let pull_a = g.weighted_sum(lse_weighted, column(pos_w))?;
    let pull_b = g.weighted_sum(lse_all, column(neg_w))?;
    let pull = g.add(pull_a, pull_b)?;

    // Push term: (1/N) sum_i log(1 + sum_{j != i} exp(S_ij) (1 - W_ij))
    let complement = log_mask(n, |i, j| {
        let c = 1.0 - w.get(i, j);
        (i != j && c > 0.0).then(|| libm::log(c))
    });
    let push_rows = g.logsumexp_rows(s, complement, true)?;
    let push = g.weighted_sum(push_rows, Tensor::filled(n, 1, 1.0 / n as f64))?;
    g.add(pull, push)
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub emotion: Var,
    pub cognition: Var,
    pub total: Var,
}

/// `L1 = L_emo + L_cog` over the emotion and cognition embeddings of one batch.
pub fn stage1_loss(
    g: &mut Graph,
    h_e: Var,
    emotion: &[EmotionLabel],
    h_c: Var,
    cognition: &[CognitionSet],
    tau: f64,
) -> Result<Stage1Loss> {
    let e = emotion_contrastive_loss(g, h_e, emotion, tau)?;
    let c = cognition_contrastive_loss(g, h_c, cognition, tau)?;
    let total = g.add(e, c)?;
    Ok(Stage1Loss {
        emotion: e,
        cognition: c,
        total,
    })
}

/// Value-level batch of embeddings with both label kinds.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    embeddings: Tensor,
    emotion: Vec<EmotionLabel>,
    cognition: Vec<CognitionSet>,
    tau: f64,
}

impl ContrastiveBatch {
    /// Validates `N >= 2`, `tau > 0` and unit-norm rows (to 1e-8).
    pub fn new(embeddings: Tensor, emotion: Vec<EmotionLabel>, cognition: Vec<CognitionSet>, tau: f64) -> Result<Self> {
        check_batch(embeddings.rows(), emotion.len(), tau)?;
        check_batch(embeddings.rows(), cognition.len(), tau)?;
        for r in 0..embeddings.rows() {
            let norm = libm::sqrt(embeddings.row(r).iter().map(|v| v * v).sum());
            if libm::fabs(norm - 1.0) > 1e-8 {
                return Err(Error::Contract(format!("embedding row {r} has norm {norm}")));
            }
        }
        Ok(Self {
            embeddings,
            emotion,
            cognition,
            tau,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn emotion_loss(&self) -> Result<f64> {
        let mut g = Graph::new();
        let e = g.constant(self.embeddings.clone());
        let l = emotion_contrastive_loss(&mut g, e, &self.emotion, self.tau)?;
        Ok(g.value(l).data()[0])
    }

    pub fn cognition_loss(&self) -> Result<f64> {
        let mut g = Graph::new();
        let e = g.constant(self.embeddings.clone());
        let l = cognition_contrastive_loss(&mut g, e, &self.cognition, self.tau)?;
        Ok(g.value(l).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use CognitionCategory::*;

    #[test]
    fn emotion_mask_cases() {
        use EmotionLabel::*;
        let m = emotion_mask(&[Negative, Negative]);
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(emotion_mask(&[Negative, Neutral, Positive]), Tensor::zeros(3, 3));
        let m = emotion_mask(&[Positive, Neutral, Positive, Negative]);
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| m.get(i, j) == 1.0)
            .collect();
        assert_eq!(ones, [(0, 2), (2, 0)]);
    }

    #[test]
    fn jaccard_cases() {
        let empty = CognitionSet::EMPTY;
        let lang = CognitionSet::from_categories(&[Language]);
        assert_eq!(empty.jaccard(empty), 1.0);
        assert_eq!(empty.jaccard(lang), 0.0);
        assert_eq!(lang.jaccard(empty), 0.0);
        let am = CognitionSet::from_categories(&[Attention, Memory]);
        let m = CognitionSet::from_categories(&[Memory]);
        assert_eq!(am.jaccard(m), 0.5);
    }

    #[test]
    fn similarity_rejects_bad_tau() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(2));
        assert!(matches!(similarity_matrix(&mut g, e, 0.0), Err(Error::Config { .. })));
        assert!(similarity_matrix(&mut g, e, -1.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(3));
        let s = similarity_matrix(&mut g, e, 1.0).unwrap();
        assert_eq!(g.value(s), &Tensor::eye(3));
        let same = g.constant(Tensor::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap());
        let s = similarity_matrix(&mut g, same, 0.5).unwrap();
        for v in g.value(s).data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_batches_are_rejected() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row_vector(alloc::vec![1.0, 0.0]));
        assert!(emotion_contrastive_loss(&mut g, e, &[EmotionLabel::Neutral], 0.1).is_err());
        assert!(cognition_contrastive_loss(&mut g, e, &[CognitionSet::EMPTY], 0.1).is_err());
    }

    #[test]
    fn batch_checks_unit_norm() {
        let bad = Tensor::from_rows(&[[1.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = ContrastiveBatch::new(
            bad,
            alloc::vec![EmotionLabel::Neutral; 2],
            alloc::vec![CognitionSet::EMPTY; 2],
            0.1,
        );
        assert!(r.is_err());
    }
}
