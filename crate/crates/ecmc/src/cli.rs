//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ecmc_core::data::Split;
use ecmc_core::graph::OpKind;

use crate::error::{exit, CliError, Result};
use crate::pipeline::{self, Report};
use crate::report::render_report;
use crate::runconfig::{read_config_file, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ecmc",
    version,
    about = "Dual-stream emotion/cognition bridge for multi-modal captioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that builds a run configuration.
#[derive(Args, Debug, Default)]
struct Settings {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `desk` (default) or `paper`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Epochs for this command's training loop.
    #[arg(long)]
    epochs: Option<String>,
    /// Training samples to generate.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    n_val: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    #[arg(long)]
    noise_std: Option<String>,
    #[arg(long)]
    neg_rate: Option<String>,
    #[arg(long)]
    prior_multiplier: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Subset of `vat`.
    #[arg(long)]
    modalities: Option<String>,
    /// Feature file format: `ecmf` or `csv`.
    #[arg(long)]
    format: Option<String>,
}

impl Settings {
    /// File first, then flags, then `--set`; `epochs_key` receives `--epochs`.
    fn resolve(&self, epochs_key: Option<&str>) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = match &self.config {
            Some(p) => read_config_file(p)?,
            None => Vec::new(),
        };
        let flags = [
            ("preset", &self.preset),
            ("seed", &self.seed),
            ("n", &self.n),
            ("n_val", &self.n_val),
            ("n_test", &self.n_test),
            ("noise_std", &self.noise_std),
            ("neg_rate", &self.neg_rate),
            ("prior_multiplier", &self.prior_multiplier),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("modalities", &self.modalities),
            ("format", &self.format),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_owned(), v.clone()));
            }
        }
        if let Some(e) = &self.epochs {
            let key = epochs_key.ok_or_else(|| CliError::Config("--epochs does not apply to this command".into()))?;
            pairs.push((key.to_owned(), e.clone()));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        RunConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Language-model pretraining of the caption decoder.
    PretrainDecoder {
        /// Dataset directory providing `captions.txt` and `vocab.txt`.
        #[arg(long, required_unless_present_all = ["corpus", "vocab"])]
        data: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train the bridge: stage 1 (contrastive) or stage 2 (captioning).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretrained decoder checkpoint (stage 2).
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Greedy-decode captions for a split.
    Decode {
        #[arg(long)]
        data: PathBuf,
        /// Stage-2 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Evaluate embeddings, captions or group statistics.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ecmc_core::gradsuite::DEFAULT_TOLERANCE)]
        tol: f64,
        /// Corrupt one op's backward rule to test the checker itself.
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Emotion separability and cognition rank correlation.
    Embeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// BLEU, ROUGE-L and CIDEr of line-aligned caption files.
    Captions {
        #[arg(long)]
        cand: PathBuf,
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-group label proportions from a JSON group table.
    Stats {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    Split::from_name(s).ok_or_else(|| CliError::Config(format!("split: unknown split {s:?} (train, val, test)")))
}

fn emit(report: &Report, out: Option<&Path>, name: &str) -> Result<()> {
    if let Some(dir) = out {
        crate::report::write_report(dir, name, report)?;
    }
    print!("{}", render_report(report));
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, settings } => {
            let cfg = settings.resolve(None)?;
            emit(&pipeline::gen_data(&cfg, &out)?, None, "")
        }
        Command::PretrainDecoder {
            data,
            corpus,
            vocab,
            out,
            settings,
        } => {
            let cfg = settings.resolve(Some("decoder_epochs"))?;
            let from_dir = |f: &str| data.as_ref().map(|d| d.join(f));
            let corpus = corpus
                .or_else(|| from_dir(crate::dataset::CORPUS))
                .ok_or_else(|| CliError::Config("pretrain-decoder needs --corpus or --data".into()))?;
            let vocab = vocab
                .or_else(|| from_dir(crate::dataset::VOCAB))
                .ok_or_else(|| CliError::Config("pretrain-decoder needs --vocab or --data".into()))?;
            emit(&pipeline::pretrain_decoder(&cfg, &corpus, &vocab, &out)?, None, "")
        }
        Command::Train {
            stage,
            data,
            checkpoint,
            decoder,
            out,
            settings,
        } => {
            let report = if stage == 1 {
                let cfg = settings.resolve(Some("stage1_epochs"))?;
                pipeline::train_stage1(&cfg, &data, &out)?
            } else {
                let cfg = settings.resolve(Some("stage2_epochs"))?;
                pipeline::train_stage2(&cfg, &data, checkpoint.as_deref(), decoder.as_deref(), &out)?
            };
            emit(&report, None, "")
        }
        Command::Decode {
            data,
            checkpoint,
            decoder,
            split,
            out,
            settings,
        } => {
            let cfg = settings.resolve(None)?;
            let split = parse_split(&split)?;
            emit(
                &pipeline::decode(&cfg, &data, &checkpoint, &decoder, split, &out)?,
                None,
                "",
            )
        }
        Command::Eval { what } => match what {
            EvalCommand::Embeddings {
                data,
                checkpoint,
                split,
                out,
                settings,
            } => {
                let cfg = settings.resolve(None)?;
                let split = parse_split(&split)?;
                let r = pipeline::eval_embeddings(&cfg, &data, &checkpoint, split)?;
                emit(&r, out.as_deref(), "embeddings_report.json")
            }
            EvalCommand::Captions { cand, refs, out } => emit(
                &pipeline::eval_captions(&cand, &refs)?,
                out.as_deref(),
                "captions_report.json",
            ),
            EvalCommand::Stats { table, out } => {
                emit(&pipeline::eval_stats(&table)?, out.as_deref(), "stats_report.json")
            }
        },
        Command::Gradcheck {
            seed,
            tol,
            inject_fault,
            out,
        } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(&name)
                        .ok_or_else(|| CliError::Config(format!("inject-fault: unknown op {name:?}")))?,
                ),
                None => None,
            };
            let (report, failed) = pipeline::gradcheck(seed, tol, fault)?;
            emit(&report, out.as_deref(), "gradcheck_report.json")?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Check(format!(
                    "gradient checks failed: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("ecmc: {e}");
            e.exit_code()
        }
    }
}
