//! Flat `key = value` run configuration.
//!
//! Values come from an optional config file, then from command-line flags
//! in order, later assignments winning. A `preset` assignment is applied
//! before all others so explicit keys always override it. Unknown keys are
//! rejected.

use std::path::Path;

use ecmc_core::bridgenet::{BridgeConfig, ModalityMask};
use ecmc_core::data::SyntheticConfig;
use ecmc_core::decoder::DecoderConfig;
use ecmc_core::optim::AdamWConfig;
use ecmc_core::qformer::Modality;
use ecmc_core::trainer::TrainConfig;

use crate::dataset::MatrixFormat;
use crate::error::{CliError, Result};
use crate::formats;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: SyntheticConfig,
    pub format: MatrixFormat,
    pub bridge: BridgeConfig,
    pub decoder: DecoderConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub decoder_epochs: usize,
    pub tau: f64,
    pub modalities: ModalityMask,
    pub prompt: String,
    pub decode_max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TrainConfig::desk();
        Self {
            seed: None,
            data: SyntheticConfig {
                splits: [600, 0, 200],
                ..SyntheticConfig::default()
            },
            format: MatrixFormat::Ecmf,
            bridge: BridgeConfig::default(),
            decoder: DecoderConfig::default(),
            optim: desk.optim,
            batch_size: desk.batch_size,
            stage1_epochs: desk.epochs,
            stage2_epochs: 100,
            decoder_epochs: 50,
            tau: desk.tau,
            modalities: ModalityMask::ALL,
            prompt: "describe state".to_owned(),
            decode_max_len: 24,
        }
    }
}

/// Every accepted key, for help output and tests.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "n",
    "n_val",
    "n_test",
    "noise_std",
    "neg_rate",
    "neutral_share",
    "orientation_rate",
    "attention_rate",
    "memory_rate",
    "language_rate",
    "prior_multiplier",
    "latent_dim",
    "t_video_min",
    "t_video_max",
    "t_audio_min",
    "t_audio_max",
    "t_text_min",
    "t_text_max",
    "d_video",
    "d_audio",
    "d_text",
    "format",
    "l_q",
    "d_q",
    "d_k",
    "d_v",
    "d_e",
    "d_c",
    "d_model",
    "d_ff",
    "max_len",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "batch_size",
    "stage1_epochs",
    "stage2_epochs",
    "decoder_epochs",
    "tau",
    "modalities",
    "prompt",
    "decode_max_len",
];

enum ModalityField {
    Dim,
    TMin,
    TMax,
}

/// `d_video`, `t_audio_min`, `t_text_max`, ...
fn modality_key(key: &str) -> Option<(Modality, ModalityField)> {
    Modality::ALL.into_iter().find_map(|m| {
        let n = m.name();
        if key == format!("d_{n}") {
            Some((m, ModalityField::Dim))
        } else if key == format!("t_{n}_min") {
            Some((m, ModalityField::TMin))
        } else if key == format!("t_{n}_max") {
            Some((m, ModalityField::TMax))
        } else {
            None
        }
    })
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn apply_preset(&mut self, preset: Preset) {
        let t = match preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper_faithful(),
        };
        self.optim = t.optim;
        self.batch_size = t.batch_size;
        self.stage1_epochs = t.epochs;
    }

    /// Sets one key. `preset` is handled here too, but [`RunConfig::from_pairs`]
    /// applies it first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some((spec, field)) = modality_key(key) {
            let v: usize = parse(key, value)?;
            let s = &mut self.data.modalities[spec.index()];
            match field {
                ModalityField::Dim => s.dim = v,
                ModalityField::TMin => s.t_min = v,
                ModalityField::TMax => s.t_max = v,
            }
            return Ok(());
        }
        let d = &mut self.data;
        match key {
            "preset" => match value.trim() {
                "desk" => self.apply_preset(Preset::Desk),
                "paper" | "paper-faithful" => self.apply_preset(Preset::Paper),
                other => {
                    return Err(CliError::Config(format!(
                        "preset: unknown preset {other:?} (desk, paper)"
                    )))
                }
            },
            "seed" => self.seed = Some(parse(key, value)?),
            "n" => d.splits[0] = parse(key, value)?,
            "n_val" => d.splits[1] = parse(key, value)?,
            "n_test" => d.splits[2] = parse(key, value)?,
            "noise_std" => d.noise_std = parse(key, value)?,
            "neg_rate" => d.negative_rate = parse(key, value)?,
            "neutral_share" => d.neutral_share = parse(key, value)?,
            "orientation_rate" => d.cognition_rates[0] = parse(key, value)?,
            "attention_rate" => d.cognition_rates[1] = parse(key, value)?,
            "memory_rate" => d.cognition_rates[2] = parse(key, value)?,
            "language_rate" => d.cognition_rates[3] = parse(key, value)?,
            "prior_multiplier" => d.prior_multiplier = parse(key, value)?,
            "latent_dim" => d.latent_dim = parse(key, value)?,
            "format" => {
                self.format = MatrixFormat::parse(value.trim())
                    .ok_or_else(|| CliError::Config(format!("format: unknown format {value:?} (ecmf, csv)")))?
            }
            "l_q" => self.bridge.l_q = parse(key, value)?,
            "d_q" => self.bridge.d_q = parse(key, value)?,
            "d_k" => self.bridge.d_k = parse(key, value)?,
            "d_v" => self.bridge.d_v = parse(key, value)?,
            "d_e" => self.bridge.d_e = parse(key, value)?,
            "d_c" => self.bridge.d_c = parse(key, value)?,
            "d_model" => self.decoder.d_model = parse(key, value)?,
            "d_ff" => self.decoder.d_ff = parse(key, value)?,
            "max_len" => self.decoder.max_len = parse(key, value)?,
            "lr" => self.optim.lr = parse(key, value)?,
            "beta1" => self.optim.beta1 = parse(key, value)?,
            "beta2" => self.optim.beta2 = parse(key, value)?,
            "eps" => self.optim.eps = parse(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value)?,
            "decoder_epochs" => self.decoder_epochs = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "modalities" => {
                self.modalities =
                    ModalityMask::parse(value.trim()).map_err(|e| CliError::Config(format!("modalities: {e}")))?
            }
            "prompt" => self.prompt = value.trim().to_owned(),
            "decode_max_len" => self.decode_max_len = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Builds a config from ordered assignments, `preset` first.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Checks every section; field names in errors match the keys.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.bridge.validate()?;
        self.decoder.validate()?;
        self.train_config(0).validate()?;
        if self.decode_max_len == 0 {
            return Err(CliError::Config("decode_max_len: must be >= 1".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| CliError::Config("seed: required (pass --seed or set seed in the config file)".into()))
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            optim: self.optim,
            tau: self.tau,
            seed: self.seed.unwrap_or(0),
            mask: self.modalities,
        }
    }

    /// Bridge dims with the modality widths of a concrete dataset.
    pub fn bridge_for(&self, modality_dims: [usize; 3]) -> BridgeConfig {
        BridgeConfig {
            modality_dims,
            ..self.bridge
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed.unwrap_or(0),
            ..self.data.clone()
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}:{}: expected key = value, got {raw:?}",
                path.display(),
                i + 1
            ))
        })?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(CliError::Config(format!(
                "{}:{}: unknown key {k:?}",
                path.display(),
                i + 1
            )));
        }
        out.push((k.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    parse_config_text(&formats::read_text(path)?, path)
}

/// Canonical `key = value` text of the settings that shape a run.
pub fn render(cfg: &RunConfig) -> String {
    let d = &cfg.data;
    let mut lines = vec![
        format!("seed = {}", cfg.seed.map_or("unset".to_owned(), |s| s.to_string())),
        format!("n = {}", d.splits[0]),
        format!("n_val = {}", d.splits[1]),
        format!("n_test = {}", d.splits[2]),
        format!("noise_std = {}", d.noise_std),
        format!("neg_rate = {}", d.negative_rate),
        format!("neutral_share = {}", d.neutral_share),
        format!("orientation_rate = {}", d.cognition_rates[0]),
        format!("attention_rate = {}", d.cognition_rates[1]),
        format!("memory_rate = {}", d.cognition_rates[2]),
        format!("language_rate = {}", d.cognition_rates[3]),
        format!("prior_multiplier = {}", d.prior_multiplier),
        format!("latent_dim = {}", d.latent_dim),
    ];
    for (m, s) in Modality::ALL.iter().map(|m| m.name()).zip(&d.modalities) {
        lines.push(format!("t_{m}_min = {}", s.t_min));
        lines.push(format!("t_{m}_max = {}", s.t_max));
        lines.push(format!("d_{m} = {}", s.dim));
    }
    let b = &cfg.bridge;
    lines.extend([
        format!("format = {}", cfg.format.extension()),
        format!("l_q = {}", b.l_q),
        format!("d_q = {}", b.d_q),
        format!("d_k = {}", b.d_k),
        format!("d_v = {}", b.d_v),
        format!("d_e = {}", b.d_e),
        format!("d_c = {}", b.d_c),
        format!("d_model = {}", cfg.decoder.d_model),
        format!("d_ff = {}", cfg.decoder.d_ff),
        format!("max_len = {}", cfg.decoder.max_len),
        format!("lr = {}", cfg.optim.lr),
        format!("beta1 = {}", cfg.optim.beta1),
        format!("beta2 = {}", cfg.optim.beta2),
        format!("eps = {}", cfg.optim.eps),
        format!("weight_decay = {}", cfg.optim.weight_decay),
        format!("batch_size = {}", cfg.batch_size),
        format!("stage1_epochs = {}", cfg.stage1_epochs),
        format!("stage2_epochs = {}", cfg.stage2_epochs),
        format!("decoder_epochs = {}", cfg.decoder_epochs),
        format!("tau = {}", cfg.tau),
        format!("modalities = {}", cfg.modalities.label()),
        format!("prompt = {}", cfg.prompt),
        format!("decode_max_len = {}", cfg.decode_max_len),
    ]);
    lines.into_iter().map(|l| l + "\n").collect()
}
