//! Dataset directories: a JSON manifest, a vocab file, the training caption
//! corpus and one matrix file per sample and modality.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ecmc_core::data::{caption_ids, Dataset, Split, UtteranceSample, MAX_TIME_STEPS};
use ecmc_core::losses::{CognitionCategory, CognitionSet, EmotionLabel};
use ecmc_core::qformer::Modality;
use ecmc_core::Tensor;

use crate::error::{CliError, Result};
use crate::formats::{self, caption_line};

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.txt";
pub const CORPUS: &str = "captions.txt";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatrixFormat {
    #[default]
    Ecmf,
    Csv,
}

impl MatrixFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ecmf" => Some(Self::Ecmf),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Ecmf => "ecmf",
            Self::Csv => "csv",
        }
    }

    fn of_path(p: &Path) -> Self {
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::Csv
        } else {
            Self::Ecmf
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub video: String,
    pub audio: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub split: String,
    pub emotion: i64,
    pub cognition: Vec<String>,
    pub caption: String,
    pub features: FeaturePaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub vocab: String,
    /// Declared sample counts per split; checked on load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_sizes: Option<BTreeMap<String, usize>>,
    pub samples: Vec<ManifestSample>,
}

fn feature_file(id: &str, m: Modality, format: MatrixFormat) -> String {
    format!("features/{id}.{}.{}", m.name(), format.extension())
}

/// Writes `dataset` under `dir` and returns the manifest written.
pub fn save_dataset(dataset: &Dataset, dir: &Path, format: MatrixFormat) -> Result<Manifest> {
    let mut samples = Vec::with_capacity(dataset.samples.len());
    let mut sizes = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        sizes.insert(split.name().to_owned(), 0);
    }
    for s in &dataset.samples {
        let paths = Modality::ALL.map(|m| feature_file(&s.id, m, format));
        for m in Modality::ALL {
            let path = dir.join(&paths[m.index()]);
            let t = &s.features[m.index()];
            match format {
                MatrixFormat::Ecmf => formats::write_matrix(&path, t)?,
                MatrixFormat::Csv => formats::write_csv_matrix(&path, t)?,
            }
        }
        *sizes.get_mut(s.split.name()).expect("known split") += 1;
        let [video, audio, text] = paths;
        samples.push(ManifestSample {
            id: s.id.clone(),
            split: s.split.name().to_owned(),
            emotion: i64::from(s.emotion.value()),
            cognition: s.cognition.categories().map(|c| c.name().to_owned()).collect(),
            caption: caption_line(&dataset.vocab, &s.caption),
            features: FeaturePaths { video, audio, text },
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        vocab: VOCAB.to_owned(),
        split_sizes: Some(sizes),
        samples,
    };
    formats::write_bytes(&dir.join(VOCAB), formats::vocab_text(&dataset.vocab).as_bytes())?;
    let corpus: String = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| caption_line(&dataset.vocab, &s.caption) + "\n")
        .collect();
    formats::write_bytes(&dir.join(CORPUS), corpus.as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    formats::write_bytes(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

/// Accepts either a dataset directory or a manifest path.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = formats::read_text(path)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::format(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(CliError::format(
            path,
            "schema",
            format!("unsupported schema {}, expected {MANIFEST_SCHEMA}", m.schema),
        ));
    }
    Ok(m)
}

/// Loads and validates a dataset from a directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_file = manifest_path(path);
    let m = read_manifest(&manifest_file)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let vocab = formats::read_vocab(&root.join(&m.vocab))?;
    let bad = |i: usize, field: &str, detail: String| {
        CliError::format(&manifest_file, format!("samples[{i}].{field}"), detail)
    };

    let mut ids = BTreeSet::new();
    let mut dims: Option<[usize; 3]> = None;
    let mut cache: BTreeMap<PathBuf, Tensor> = BTreeMap::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for (i, s) in m.samples.iter().enumerate() {
        if !ids.insert(s.id.as_str()) {
            return Err(bad(i, "id", format!("duplicate id {:?}", s.id)));
        }
        let split =
            Split::from_name(&s.split).ok_or_else(|| bad(i, "split", format!("unknown split {:?}", s.split)))?;
        let emotion = EmotionLabel::from_value(s.emotion)
            .ok_or_else(|| bad(i, "emotion", format!("label {} is not in {{-1, 0, 1}}", s.emotion)))?;
        let mut cognition = CognitionSet::EMPTY;
        for c in &s.cognition {
            let cat = CognitionCategory::from_name(c)
                .ok_or_else(|| bad(i, "cognition", format!("unknown category {c:?}")))?;
            cognition.insert(cat);
        }
        let caption = caption_ids(&vocab, &s.caption).map_err(|e| bad(i, "caption", e.to_string()))?;

        let rel = [&s.features.video, &s.features.audio, &s.features.text];
        let mut features: Vec<Tensor> = Vec::with_capacity(3);
        for m in Modality::ALL {
            let path = root.join(rel[m.index()]);
            let t = match cache.get(&path) {
                Some(t) => t.clone(),
                None => {
                    let t = match MatrixFormat::of_path(&path) {
                        MatrixFormat::Ecmf => formats::read_matrix(&path)?,
                        MatrixFormat::Csv => formats::read_csv_matrix(&path)?,
                    };
                    cache.insert(path.clone(), t.clone());
                    t
                }
            };
            let cap = MAX_TIME_STEPS[m.index()];
            if t.rows() == 0 || t.rows() > cap {
                return Err(CliError::format(
                    &path,
                    "header",
                    format!("{} has {} time steps; allowed 1..={cap}", m.name(), t.rows()),
                ));
            }
            features.push(t);
        }
        let features: [Tensor; 3] = features.try_into().expect("three modalities");
        let these = features.each_ref().map(Tensor::cols);
        match dims {
            None => dims = Some(these),
            Some(d) if d != these => {
                return Err(bad(
                    i,
                    "features",
                    format!("feature widths {these:?} differ from {d:?}"),
                ));
            }
            _ => {}
        }
        samples.push(UtteranceSample {
            id: s.id.clone(),
            split,
            features,
            emotion,
            cognition,
            caption,
        });
    }
    if let Some(declared) = &m.split_sizes {
        for (name, &n) in declared {
            let split = Split::from_name(name)
                .ok_or_else(|| CliError::format(&manifest_file, "split_sizes", format!("unknown split {name:?}")))?;
            let found = samples.iter().filter(|s| s.split == split).count();
            if found != n {
                return Err(CliError::format(
                    &manifest_file,
                    "split_sizes",
                    format!("{name} declares {n} samples but lists {found}"),
                ));
            }
        }
    }
    let ds = Dataset { vocab, samples };
    ds.validate()
        .map_err(|e| CliError::format(&manifest_file, "samples", e.to_string()))?;
    Ok(ds)
}
