//! Caption metrics, embedding diagnostics and per-group label statistics.
//!
//! Caption text is tokenized by lowercasing and splitting on anything that
//! is not alphanumeric; punctuation is dropped. Scores are only comparable
//! under this tokenizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::CognitionSet;
use crate::tensor::{Tensor, EPS};

pub const ROUGE_BETA2: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A candidate caption with one or more references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl TokenizedPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Contract("a caption pair needs at least one reference".into()));
        }
        Ok(Self { candidate, references })
    }

    pub fn from_text(candidate: &str, references: &[&str]) -> Result<Self> {
        Self::new(tokenize(candidate), references.iter().map(|r| tokenize(r)).collect())
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped(pair: &TokenizedPair, n: usize) -> (usize, usize) {
    let cand = ngrams(&pair.candidate, n);
    let mut max_ref: Counts<'_> = BTreeMap::new();
    for r in &pair.references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let hits = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (hits, pair.candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to the candidate length (shorter wins ties).
fn closest_ref_len(pair: &TokenizedPair) -> usize {
    let c = pair.candidate.len();
    pair.references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn bleu_from_counts(hits: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for (&h, &t) in hits.iter().zip(totals) {
        if h == 0 || t == 0 {
            return 0.0;
        }
        log_p += libm::log(h as f64 / t as f64);
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / cand_len as f64)
    };
    bp * libm::exp(log_p / hits.len() as f64)
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order must be in 1..=4, got {n}")));
    }
    Ok(())
}

/// Sentence BLEU-n: clipped precisions, uniform geometric mean, brevity penalty.
pub fn bleu_n(pair: &TokenizedPair, n: usize) -> Result<f64> {
    corpus_bleu(core::slice::from_ref(pair), n)
}

/// Corpus BLEU-n: counts and lengths pooled over all pairs before combining.
pub fn corpus_bleu(pairs: &[TokenizedPair], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut hits = alloc::vec![0; n];
    let mut totals = alloc::vec![0; n];
    let (mut c, mut r) = (0, 0);
    for p in pairs {
        for k in 1..=n {
            let (h, t) = clipped(p, k);
            hits[k - 1] += h;
            totals[k - 1] += t;
        }
        c += p.candidate.len();
        r += closest_ref_len(p);
    }
    Ok(bleu_from_counts(&hits, &totals, c, r))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (β² = 1.2), best over references.
pub fn rouge_l(pair: &TokenizedPair) -> f64 {
    let c = &pair.candidate;
    pair.references
        .iter()
        .map(|r| {
            let l = lcs_len(c, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + ROUGE_BETA2) * p * rec / (rec + ROUGE_BETA2 * p)
        })
        .fold(0.0, f64::max)
}

/// Per-pair CIDEr scores and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

type TfIdf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &Counts<'_>, log_docs: f64) -> TfIdf<'a> {
    ngrams(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_docs - libm::log(d)))
        })
        .collect()
}

fn cosine(a: &TfIdf<'_>, b: &TfIdf<'_>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = libm::sqrt(a.values().map(|x| x * x).sum());
    let nb = libm::sqrt(b.values().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Unscaled CIDEr: mean over n = 1..4 of the mean tf-idf cosine to each
/// reference, with document frequencies taken over the reference sets.
pub fn cider(pairs: &[TokenizedPair]) -> Result<CiderScores> {
    if pairs.is_empty() {
        return Err(Error::Contract("CIDEr needs a nonempty corpus".into()));
    }
    let log_docs = libm::log(pairs.len() as f64);
    let mut per_pair = alloc::vec![0.0; pairs.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: Counts<'_> = BTreeMap::new();
        for p in pairs {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in &p.references {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (score, p) in per_pair.iter_mut().zip(pairs) {
            let c = tfidf(&p.candidate, n, &df, log_docs);
            let sum: f64 = p
                .references
                .iter()
                .map(|r| cosine(&c, &tfidf(r, n, &df, log_docs)))
                .sum();
            *score += sum / p.references.len() as f64 / CIDER_MAX_N as f64;
        }
    }
    let mean = per_pair.iter().sum::<f64>() / pairs.len() as f64;
    Ok(CiderScores { per_pair, mean })
}

/// Corpus-level caption scores as reported by the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_pairs: usize,
    pub warnings: Vec<String>,
}

pub fn caption_scores(pairs: &[TokenizedPair]) -> Result<CaptionScores> {
    if pairs.is_empty() {
        return Err(Error::Contract("no caption pairs to score".into()));
    }
    let warnings = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.candidate.is_empty())
        .map(|(i, _)| format!("pair {i}: empty candidate scores 0"))
        .collect();
    let rouge = pairs.iter().map(rouge_l).sum::<f64>() / pairs.len() as f64;
    Ok(CaptionScores {
        bleu1: corpus_bleu(pairs, 1)?,
        bleu2: corpus_bleu(pairs, 2)?,
        bleu4: corpus_bleu(pairs, 4)?,
        rouge_l: rouge,
        cider: cider(pairs)?.mean,
        n_pairs: pairs.len(),
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    pub intra_cos: f64,
    pub inter_cos: f64,
    pub margin: f64,
    pub silhouette: f64,
}

fn cosine_matrix(emb: &Tensor) -> Result<Vec<f64>> {
    let n = emb.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| libm::sqrt(emb.row(i).iter().map(|x| x * x).sum()))
        .collect();
    if let Some(i) = norms.iter().position(|&v| v < EPS) {
        return Err(Error::Degenerate {
            op: "cosine",
            detail: format!("row {i} has zero norm"),
        });
    }
    let mut out = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(a, b)| a * b).sum();
            out[i * n + j] = dot / (norms[i] * norms[j]);
        }
    }
    Ok(out)
}

/// Pairwise-cosine class structure of an embedding matrix.
///
/// Intra/inter means pool all unordered pairs. Silhouette uses cosine
/// distance; members of singleton classes score 0.
pub fn embedding_separability(emb: &Tensor, labels: &[usize]) -> Result<Separability> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "embedding_separability",
            detail: format!("{n} rows but {} labels", labels.len()),
        });
    }
    let classes: BTreeMap<usize, usize> = labels.iter().fold(BTreeMap::new(), |mut m, &l| {
        *m.entry(l).or_insert(0) += 1;
        m
    });
    if classes.len() < 2 {
        return Err(Error::Contract("separability needs at least two classes".into()));
    }
    let cos = cosine_matrix(emb)?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                intra += cos[i * n + j];
                n_intra += 1;
            } else {
                inter += cos[i * n + j];
                n_inter += 1;
            }
        }
    }
    let intra_cos = if n_intra == 0 { 0.0 } else { intra / n_intra as f64 };
    let inter_cos = inter / n_inter as f64;

    let mut sil = 0.0;
    for i in 0..n {
        if classes[&labels[i]] < 2 {
            continue;
        }
        let mut dist: BTreeMap<usize, f64> = BTreeMap::new();
        for j in (0..n).filter(|&j| j != i) {
            *dist.entry(labels[j]).or_insert(0.0) += 1.0 - cos[i * n + j];
        }
        let a = dist[&labels[i]] / (classes[&labels[i]] - 1) as f64;
        let b = dist
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(l, d)| d / classes[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            sil += (b - a) / m;
        }
    }
    Ok(Separability {
        intra_cos,
        inter_cos,
        margin: intra_cos - inter_cos,
        silhouette: sil / n as f64,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman ρ between pairwise Jaccard label overlap and embedding cosine
/// over all `i < j`. `Ok(None)` means undefined (constant overlap).
pub fn jaccard_similarity_correlation(emb: &Tensor, labels: &[CognitionSet]) -> Result<Option<f64>> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "jaccard_similarity_correlation",
            detail: format!("{n} rows but {} labels", labels.len()),
        });
    }
    if n < 3 {
        return Err(Error::Contract("rank correlation needs at least 3 samples".into()));
    }
    let cos = cosine_matrix(emb)?;
    let (mut w, mut c) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            w.push(labels[i].jaccard(labels[j]));
            c.push(cos[i * n + j]);
        }
    }
    Ok(spearman(&w, &c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Depression,
    Anxiety,
    Healthy,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Depression, Group::Anxiety, Group::Healthy];

    pub fn name(self) -> &'static str {
        match self {
            Group::Depression => "depression",
            Group::Anxiety => "anxiety",
            Group::Healthy => "healthy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// Flags of one utterance: negative emotion plus the four cognition deficits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UtteranceFlags {
    pub negative: bool,
    pub cognition: CognitionSet,
}

impl UtteranceFlags {
    pub fn as_array(&self) -> [bool; 5] {
        let b = self.cognition.bits();
        [self.negative, b & 1 != 0, b & 2 != 0, b & 4 != 0, b & 8 != 0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupLabelTable {
    pub subjects: BTreeMap<String, Group>,
    pub utterances: Vec<(String, UtteranceFlags)>,
}

/// Category order of proportion arrays.
pub const PROPORTION_NAMES: [&str; 5] = ["negative", "orientation", "attention", "memory", "language"];

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub n_subjects: usize,
    pub proportions: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupProportions {
    pub groups: BTreeMap<Group, GroupStats>,
    pub warnings: Vec<String>,
}

/// Per-subject flag proportions, averaged with equal weight per subject.
pub fn group_proportions(table: &GroupLabelTable) -> Result<GroupProportions> {
    if table.subjects.is_empty() {
        return Err(Error::Contract("group table has no subjects".into()));
    }
    let mut counts: BTreeMap<&str, ([usize; 5], usize)> = BTreeMap::new();
    for (subject, flags) in &table.utterances {
        if !table.subjects.contains_key(subject) {
            return Err(Error::Contract(format!(
                "utterance refers to unknown subject {subject:?}"
            )));
        }
        let e = counts.entry(subject.as_str()).or_insert(([0; 5], 0));
        for (k, f) in flags.as_array().into_iter().enumerate() {
            e.0[k] += usize::from(f);
        }
        e.1 += 1;
    }
    let mut warnings = Vec::new();
    let mut acc: BTreeMap<Group, ([f64; 5], usize)> = BTreeMap::new();
    for (subject, &group) in &table.subjects {
        let Some((flags, total)) = counts.get(subject.as_str()) else {
            warnings.push(format!("subject {subject:?} has no utterances and is excluded"));
            continue;
        };
        let e = acc.entry(group).or_insert(([0.0; 5], 0));
        for k in 0..5 {
            e.0[k] += flags[k] as f64 / *total as f64;
        }
        e.1 += 1;
    }
    let groups = acc
        .into_iter()
        .map(|(g, (sums, n))| {
            (
                g,
                GroupStats {
                    n_subjects: n,
                    proportions: sums.map(|s| s / n as f64),
                },
            )
        })
        .collect();
    Ok(GroupProportions { groups, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &str, r: &str) -> TokenizedPair {
        TokenizedPair::from_text(c, &[r]).unwrap()
    }

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(
            tokenize("Emotion NEGATIVE. cognition, none!"),
            ["emotion", "negative", "cognition", "none"]
        );
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let p = pair("a b c d e", "a b c d e");
        for n in [1, 2, 4] {
            assert_eq!(bleu_n(&p, n).unwrap(), 1.0);
            assert_eq!(bleu_n(&pair("a b c d", "w x y z"), n).unwrap(), 0.0);
        }
        assert!(bleu_n(&p, 0).is_err());
    }

    #[test]
    fn bleu_clipping() {
        // Clipped unigram precision 1/3; the candidate is longer, so no brevity penalty.
        let p = pair("the the the", "the cat");
        assert!((bleu_n(&p, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // Short candidate pays the penalty exp(1 - r/c).
        let p = pair("the", "the cat");
        assert!((bleu_n(&p, 1).unwrap() - libm::exp(1.0 - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rouge_example() {
        let p = pair("the cat sat", "the cat");
        let (pr, r) = (2.0 / 3.0, 1.0);
        let f = 2.2 * pr * r / (r + 1.2 * pr);
        assert!((rouge_l(&p) - f).abs() < 1e-15);
        assert_eq!(rouge_l(&pair("a b", "a b")), 1.0);
        assert_eq!(rouge_l(&pair("a b", "c d")), 0.0);
    }

    #[test]
    fn cider_single_pair_degenerates() {
        let s = cider(&[pair("a b", "a b")]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!(cider(&[]).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), [2.5, 4.0, 2.5, 1.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn group_subject_averaging() {
        let neg = |n| UtteranceFlags {
            negative: n,
            cognition: CognitionSet::EMPTY,
        };
        let mut t = GroupLabelTable::default();
        t.subjects.insert("a".into(), Group::Depression);
        t.subjects.insert("b".into(), Group::Depression);
        t.subjects.insert("c".into(), Group::Healthy);
        for f in [true, false] {
            t.utterances.push(("a".into(), neg(f)));
        }
        for f in [true, false, false, false] {
            t.utterances.push(("b".into(), neg(f)));
        }
        let r = group_proportions(&t).unwrap();
        assert_eq!(r.groups[&Group::Depression].proportions[0], 0.375);
        assert_eq!(r.groups[&Group::Depression].n_subjects, 2);
        assert!(!r.groups.contains_key(&Group::Healthy));
        assert_eq!(r.warnings.len(), 1);
    }
}
