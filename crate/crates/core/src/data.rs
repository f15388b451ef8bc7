//! Seeded synthetic utterances standing in for frozen encoder outputs,
//! plus batching.
//!
//! Each sample draws an emotion class and an independent-Bernoulli
//! cognition label set. Every time step of modality `m` is
//! `e A_m + c B_m + noise`, where `e` is the class centroid, `c` the
//! indicator vector of the label set, and `A_m`, `B_m` are fixed random
//! mixing matrices of the generated "world".

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::decoder::{Vocab, EOS};
use crate::error::{config_err, Error, Result};
use crate::losses::{CognitionCategory, CognitionSet, EmotionLabel};
use crate::qformer::Modality;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Label priors of the reference corpus: negative emotion rate.
pub const NEGATIVE_RATE: f64 = 0.3185;
/// Orientation, attention, memory and language deficit rates of the reference corpus.
pub const COGNITION_RATES: [f64; 4] = [0.0091, 0.0854, 0.1038, 0.1589];
/// Train/validation/test sizes of the reference corpus.
pub const REFERENCE_SPLITS: [usize; 3] = [13_536, 1_402, 3_790];
/// Largest sequence length accepted per modality (video, audio, text).
pub const MAX_TIME_STEPS: [usize; 3] = [512, 1024, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalitySpec {
    pub t_min: usize,
    pub t_max: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionTemplate {
    /// `emotion <class> . cognition <categories | none> .`
    Basic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Samples per split (train, val, test).
    pub splits: [usize; 3],
    /// Video, audio, text.
    pub modalities: [ModalitySpec; 3],
    pub noise_std: f64,
    pub negative_rate: f64,
    /// Share of non-negative samples labelled neutral (rest positive).
    pub neutral_share: f64,
    pub cognition_rates: [f64; 4],
    /// Scales every cognition rate (clamped to 1) for class balance.
    pub prior_multiplier: f64,
    pub latent_dim: usize,
    pub template: CaptionTemplate,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            splits: [600, 0, 0],
            modalities: [
                ModalitySpec {
                    t_min: 16,
                    t_max: 32,
                    dim: 24,
                },
                ModalitySpec {
                    t_min: 32,
                    t_max: 64,
                    dim: 24,
                },
                ModalitySpec {
                    t_min: 8,
                    t_max: 16,
                    dim: 24,
                },
            ],
            noise_std: 0.1,
            negative_rate: NEGATIVE_RATE,
            neutral_share: 0.5,
            cognition_rates: COGNITION_RATES,
            prior_multiplier: 1.0,
            latent_dim: 4,
            template: CaptionTemplate::Basic,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn n_samples(&self) -> usize {
        self.splits.iter().sum()
    }

    pub fn effective_cognition_rates(&self) -> [f64; 4] {
        self.cognition_rates.map(|r| f64::min(1.0, r * self.prior_multiplier))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                config_err(name, format!("{v} is outside [0, 1]"))
            }
        };
        unit("neg_rate", self.negative_rate)?;
        unit("neutral_share", self.neutral_share)?;
        for (c, &r) in CognitionCategory::ALL.iter().zip(&self.cognition_rates) {
            unit(&format!("{}_rate", c.name()), r)?;
        }
        if !(self.prior_multiplier >= 0.0) || !self.prior_multiplier.is_finite() {
            return config_err("prior_multiplier", "must be a finite value >= 0");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return config_err("noise_std", "must be a finite value >= 0");
        }
        if self.latent_dim == 0 {
            return config_err("latent_dim", "must be >= 1");
        }
        if self.n_samples() == 0 {
            return config_err("n", "must be >= 1");
        }
        for (m, spec) in Modality::ALL.iter().zip(&self.modalities) {
            if spec.dim == 0 {
                return config_err(&format!("d_{}", m.name()), "must be >= 1");
            }
            if spec.t_min == 0 || spec.t_min > spec.t_max {
                return config_err(
                    &format!("t_{}_min", m.name()),
                    format!("invalid range {}..={}", spec.t_min, spec.t_max),
                );
            }
            if spec.t_max > MAX_TIME_STEPS[m.index()] {
                return config_err(
                    &format!("t_{}_max", m.name()),
                    format!("{} exceeds the cap of {}", spec.t_max, MAX_TIME_STEPS[m.index()]),
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceSample {
    pub id: String,
    pub split: Split,
    /// Video, audio, text feature matrices (`T_m x d_m`).
    pub features: [Tensor; 3],
    pub emotion: EmotionLabel,
    pub cognition: CognitionSet,
    /// Caption token ids, terminated by EOS.
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub samples: Vec<UtteranceSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&UtteranceSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn modality_dims(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| s.features.each_ref().map(Tensor::cols))
    }

    /// Checks matching feature widths, nonempty sequences, caption ids and EOS.
    pub fn validate(&self) -> Result<()> {
        let Some(dims) = self.modality_dims() else {
            return Ok(());
        };
        for s in &self.samples {
            for m in Modality::ALL {
                let f = &s.features[m.index()];
                if f.cols() != dims[m.index()] {
                    return Err(Error::Shape {
                        op: "dataset",
                        detail: format!(
                            "{} {} has width {}, expected {}",
                            s.id,
                            m.name(),
                            f.cols(),
                            dims[m.index()]
                        ),
                    });
                }
                if f.rows() == 0 || f.rows() > MAX_TIME_STEPS[m.index()] {
                    return Err(Error::Shape {
                        op: "dataset",
                        detail: format!("{} {} has {} time steps", s.id, m.name(), f.rows()),
                    });
                }
            }
            if s.caption.last() != Some(&EOS) || s.caption.iter().any(|&t| t >= self.vocab.len()) {
                return Err(Error::Contract(format!("{} has an invalid caption", s.id)));
            }
        }
        Ok(())
    }
}

/// Template caption words for a label pair.
pub fn caption_text(emotion: EmotionLabel, cognition: CognitionSet) -> String {
    let mut s = format!("emotion {} . cognition", emotion.name());
    if cognition.is_empty() {
        s.push_str(" none");
    }
    for c in cognition.categories() {
        s.push(' ');
        s.push_str(c.name());
    }
    s.push_str(" .");
    s
}

/// Caption ids with trailing EOS.
pub fn caption_ids(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text)?;
    ids.push(EOS);
    Ok(ids)
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Fixed random structure shared by every sample of a generated dataset.
struct World {
    centroids: Tensor,
    emotion_mix: [Tensor; 3],
    cognition_mix: [Tensor; 3],
}

impl World {
    fn new(cfg: &SyntheticConfig) -> Self {
        let k = cfg.latent_dim;
        let mut r = rng::stream(cfg.seed, "data.world", 0);
        let mut centroids = normal_matrix(&mut r, 3, k, 1.0);
        for i in 0..3 {
            let n = libm::sqrt(centroids.row(i).iter().map(|v| v * v).sum());
            for v in centroids.row_mut(i) {
                *v /= n.max(1e-12);
            }
        }
        let mix = |r: &mut Rng, rows: usize| {
            Modality::ALL.map(|m| normal_matrix(r, rows, cfg.modalities[m.index()].dim, 1.0 / libm::sqrt(rows as f64)))
        };
        let emotion_mix = mix(&mut r, k);
        let cognition_mix = mix(&mut r, 4);
        Self {
            centroids,
            emotion_mix,
            cognition_mix,
        }
    }

    /// Noise-free per-step signal of one modality.
    fn signal(&self, m: Modality, emotion: EmotionLabel, cognition: CognitionSet) -> Vec<f64> {
        let a = &self.emotion_mix[m.index()];
        let b = &self.cognition_mix[m.index()];
        let e = self.centroids.row(emotion.index());
        let mut out = alloc::vec![0.0; a.cols()];
        for (i, &ev) in e.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(a.row(i)) {
                *o += ev * w;
            }
        }
        for c in cognition.categories() {
            for (o, w) in out.iter_mut().zip(b.row(c as usize)) {
                *o += w;
            }
        }
        out
    }
}

fn draw_labels(cfg: &SyntheticConfig, r: &mut Rng) -> (EmotionLabel, CognitionSet) {
    let u: f64 = r.random();
    let emotion = if u < cfg.negative_rate {
        EmotionLabel::Negative
    } else if r.random::<f64>() < cfg.neutral_share {
        EmotionLabel::Neutral
    } else {
        EmotionLabel::Positive
    };
    let mut cognition = CognitionSet::EMPTY;
    for (c, rate) in CognitionCategory::ALL.iter().zip(cfg.effective_cognition_rates()) {
        if r.random::<f64>() < rate {
            cognition.insert(*c);
        }
    }
    (emotion, cognition)
}

/// Generates a dataset that is a pure function of `cfg` (including its seed).
pub fn generate_synthetic(cfg: &SyntheticConfig, vocab: &Vocab) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut samples = Vec::with_capacity(cfg.n_samples());
    let mut index = 0u64;
    for (split, &count) in Split::ALL.iter().zip(&cfg.splits) {
        for _ in 0..count {
            let mut r = rng::stream(cfg.seed, "data.sample", index);
            let (emotion, cognition) = draw_labels(cfg, &mut r);
            let features = Modality::ALL.map(|m| {
                let spec = cfg.modalities[m.index()];
                let t = Uniform::new_inclusive(spec.t_min, spec.t_max)
                    .expect("validated range")
                    .sample(&mut r);
                let signal = world.signal(m, emotion, cognition);
                let mut data = Vec::with_capacity(t * spec.dim);
                for _ in 0..t {
                    for &s in &signal {
                        let noise: f64 = r.sample(StandardNormal);
                        data.push(s + cfg.noise_std * noise);
                    }
                }
                Tensor::new(t, spec.dim, data).expect("shape")
            });
            let caption = caption_ids(vocab, &caption_text(emotion, cognition))?;
            samples.push(UtteranceSample {
                id: format!("s{index:06}"),
                split: *split,
                features,
                emotion,
                cognition,
                caption,
            });
            index += 1;
        }
    }
    Ok(Dataset {
        vocab: vocab.clone(),
        samples,
    })
}

/// Empirical label rates: negative emotion then the four cognition categories.
pub fn label_rates<'a>(samples: impl IntoIterator<Item = &'a UtteranceSample>) -> ([f64; 5], usize) {
    let mut counts = [0usize; 5];
    let mut n = 0;
    for s in samples {
        n += 1;
        if s.emotion == EmotionLabel::Negative {
            counts[0] += 1;
        }
        for (i, c) in CognitionCategory::ALL.iter().enumerate() {
            if s.cognition.contains(*c) {
                counts[i + 1] += 1;
            }
        }
    }
    let rates = counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 });
    (rates, n)
}

/// Index batches for one epoch.
///
/// With `shuffle`, the order is a permutation drawn from `(seed, epoch)`.
/// A trailing batch of one item is merged into the previous batch, since
/// contrastive losses need pairs.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return config_err("batch_size", format!("must be >= 2, got {batch_size}"));
    }
    if n < 2 {
        return Err(Error::Contract(format!("dataset of {n} samples cannot form a pair")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut r = rng::stream(seed, "batches", epoch);
        order.shuffle(&mut r);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    Ok(batches)
}
