//! The work behind each command: load inputs, run core routines, write
//! artifacts and a JSON report into an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Map, Value};

use ecmc_core::bridgenet::{embed_all, BridgeConfig, BridgeParams};
use ecmc_core::data::{generate_synthetic, label_rates, Dataset, Split, UtteranceSample};
use ecmc_core::decoder::{DecoderConfig, DecoderParams, PrefixBridges, Vocab};
use ecmc_core::gradcheck::GradCheckOptions;
use ecmc_core::gradsuite::run_suite;
use ecmc_core::graph::OpKind;
use ecmc_core::losses::{CognitionCategory, CognitionSet};
use ecmc_core::metrics::{
    caption_scores, embedding_separability, group_proportions, jaccard_similarity_correlation, Group, GroupLabelTable,
    TokenizedPair, UtteranceFlags, PROPORTION_NAMES,
};
use ecmc_core::params::{load_from, named, ParamTree};
use ecmc_core::trainer::{self, group_bytes, ParamGroup, PrefixCodebook, Stage};
use ecmc_core::Tensor;

use crate::dataset::{load_dataset, save_dataset};
use crate::error::{CliError, Result};
use crate::formats::{self, caption_line, NamedTensors};
use crate::report::{maybe, new_report, sha256_hex, write_caption_curve, write_report, write_stage1_curve};
use crate::runconfig::{render, RunConfig};

pub type Report = Map<String, Value>;

pub const STAGE1_CHECKPOINT: &str = "stage1.ecmb";
pub const STAGE2_CHECKPOINT: &str = "stage2.ecmb";
pub const DECODER_CHECKPOINT: &str = "decoder.ecmb";
pub const CANDIDATES: &str = "candidates.txt";
pub const REFERENCES: &str = "references.txt";

fn named_map<P: ParamTree<Tensor>>(tree: &P, prefix: &str, out: &mut NamedTensors) {
    for (name, t) in named(tree, prefix) {
        out.insert(name, t.clone());
    }
}

/// sha256 of every group that has parameters in `tensors`.
fn group_hashes(tensors: &NamedTensors) -> Value {
    let mut m = Map::new();
    for g in ParamGroup::ALL {
        let bytes = group_bytes(tensors, g);
        if !bytes.is_empty() {
            m.insert(g.name().into(), json!(sha256_hex(&bytes)));
        }
    }
    Value::Object(m)
}

fn config_value(cfg: &RunConfig) -> Value {
    let m: Map<String, Value> = render(cfg)
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_owned(), json!(v)))
        .collect();
    Value::Object(m)
}

fn rates_value(rates: [f64; 5]) -> Value {
    Value::Object(
        PROPORTION_NAMES
            .iter()
            .zip(rates)
            .map(|(k, v)| ((*k).to_owned(), json!(v)))
            .collect(),
    )
}

fn prompt_ids(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<usize>> {
    vocab
        .encode(&cfg.prompt)
        .map_err(|e| CliError::Config(format!("prompt: {e}")))
}

fn need_split<'a>(ds: &'a Dataset, split: Split, min: usize, what: &str) -> Result<Vec<&'a UtteranceSample>> {
    let s = ds.split(split);
    if s.len() < min {
        return Err(CliError::Config(format!(
            "{what} needs at least {min} {} samples, dataset has {}",
            split.name(),
            s.len()
        )));
    }
    Ok(s)
}

fn dims_of(ds: &Dataset) -> Result<[usize; 3]> {
    ds.modality_dims()
        .ok_or_else(|| CliError::Config("dataset has no samples".into()))
}

/// Loads bridge parameters of the configured shape from a checkpoint.
pub fn load_bridge(path: &Path, cfg: &BridgeConfig) -> Result<BridgeParams> {
    let tensors = formats::read_checkpoint(path)?;
    let mut p = BridgeParams::init(cfg, 0)?;
    load_from(&mut p, "", &tensors).map_err(|e| CliError::format(path, "sections", e.to_string()))?;
    Ok(p)
}

/// Loads a decoder checkpoint, taking its shape from the stored tensors.
pub fn load_decoder(path: &Path) -> Result<(DecoderParams, DecoderConfig)> {
    let tensors = formats::read_checkpoint(path)?;
    let shape = |name: &str| {
        tensors
            .get(name)
            .map(Tensor::shape)
            .ok_or_else(|| CliError::format(path, "sections", format!("missing parameter `{name}`")))
    };
    let (vocab, d_model) = shape("decoder.tok_emb")?;
    let (max_len, _) = shape("decoder.pos_emb")?;
    let (_, d_ff) = shape("decoder.w_ff1")?;
    let cfg = DecoderConfig { d_model, d_ff, max_len };
    let mut dec = DecoderParams::zeros(&cfg, vocab);
    load_from(&mut dec, "decoder", &tensors).map_err(|e| CliError::format(path, "sections", e.to_string()))?;
    Ok((dec, cfg))
}

fn load_prefix(path: &Path, bridge: &BridgeConfig, d_model: usize) -> Result<PrefixBridges> {
    let tensors = formats::read_checkpoint(path)?;
    let mut p = PrefixBridges::init(bridge.d_e, bridge.d_c, d_model, 0);
    load_from(&mut p, "prefix", &tensors).map_err(|e| CliError::format(path, "sections", e.to_string()))?;
    Ok(p)
}

/// Generates a synthetic dataset directory.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Report> {
    cfg.require_seed()?;
    cfg.validate()?;
    let ds = generate_synthetic(&cfg.synthetic(), &Vocab::caption_default())?;
    let manifest = save_dataset(&ds, out, cfg.format)?;
    formats::write_bytes(&out.join("run.cfg"), render(cfg).as_bytes())?;

    let mut splits = Map::new();
    for split in Split::ALL {
        let (rates, n) = label_rates(ds.split(split));
        splits.insert(split.name().into(), json!({ "n": n, "rates": rates_value(rates) }));
    }
    let mut target = [cfg.data.negative_rate; 5];
    target[1..].copy_from_slice(&cfg.data.effective_cognition_rates());
    let mut r = new_report("gen-data");
    r.insert("config".into(), config_value(cfg));
    r.insert("n_samples".into(), json!(manifest.samples.len()));
    r.insert("target_rates".into(), rates_value(target));
    r.insert("all".into(), {
        let (rates, n) = label_rates(&ds.samples);
        json!({ "n": n, "rates": rates_value(rates) })
    });
    r.insert("splits".into(), Value::Object(splits));
    write_report(out, "data_report.json", &r)?;
    Ok(r)
}

/// Language-model pretraining of the decoder on a caption corpus.
pub fn pretrain_decoder(cfg: &RunConfig, corpus: &Path, vocab_path: &Path, out: &Path) -> Result<Report> {
    let seed = cfg.require_seed()?;
    cfg.validate()?;
    let vocab = formats::read_vocab(vocab_path)?;
    let captions = formats::read_corpus(corpus, &vocab)?;
    let prompt = prompt_ids(cfg, &vocab)?;
    let mut dec = DecoderParams::init(&cfg.decoder, vocab.len(), seed)?;
    let codebook = PrefixCodebook::new(vocab.len(), cfg.decoder.d_model, seed);
    let tc = cfg.train_config(cfg.decoder_epochs);
    let log = trainer::pretrain_decoder(&mut dec, &codebook, &captions, &prompt, vocab.id("."), &tc)?;

    let mut tensors = NamedTensors::new();
    named_map(&dec, "decoder", &mut tensors);
    formats::write_checkpoint(&out.join(DECODER_CHECKPOINT), &tensors)?;
    write_caption_curve(&out.join("decoder_curve.csv"), "L_lm", &log.curve)?;

    let mut r = new_report("pretrain-decoder");
    r.insert("config".into(), config_value(cfg));
    r.insert("n_captions".into(), json!(captions.len()));
    r.insert("corpus_sha256".into(), json!(sha256_hex(&formats::read_bytes(corpus)?)));
    r.insert("epochs".into(), json!(tc.epochs));
    r.insert("steps".into(), json!(log.optimizer.steps()));
    r.insert("initial_loss".into(), json!(log.curve[0].loss));
    r.insert("final_loss".into(), json!(log.curve.last().expect("row 0").loss));
    r.insert("hashes".into(), group_hashes(&tensors));
    write_report(out, "decoder_report.json", &r)?;
    Ok(r)
}

/// Emotion-stream separability and cognition-stream rank correlation of one split.
fn embedding_summary(params: &BridgeParams, samples: &[&UtteranceSample], cfg: &RunConfig) -> Result<Value> {
    let feats: Vec<&[Tensor; 3]> = samples.iter().map(|s| &s.features).collect();
    let (h_e, h_c) = embed_all(&feats, params, cfg.modalities)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.emotion.index()).collect();
    let sep = embedding_separability(&h_e, &labels)?;
    let cog: Vec<CognitionSet> = samples.iter().map(|s| s.cognition).collect();
    let rho = jaccard_similarity_correlation(&h_c, &cog)?;
    Ok(json!({
        "n": samples.len(),
        "emotion": {
            "intra_cos": sep.intra_cos,
            "inter_cos": sep.inter_cos,
            "margin": sep.margin,
            "silhouette": sep.silhouette,
        },
        "cognition_spearman": maybe(rho),
    }))
}

/// Stage 1: contrastive training of both bridge streams.
pub fn train_stage1(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Report> {
    let seed = cfg.require_seed()?;
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let train = need_split(&ds, Split::Train, 2, "stage 1")?;
    let bcfg = cfg.bridge_for(dims_of(&ds)?);
    let mut params = BridgeParams::init(&bcfg, seed)?;
    let mut before = NamedTensors::new();
    named_map(&params, "", &mut before);
    let tc = cfg.train_config(cfg.stage1_epochs);
    let log = trainer::train_stage1(&mut params, &train, &tc)?;
    let mut after = NamedTensors::new();
    named_map(&params, "", &mut after);

    formats::write_checkpoint(&out.join(STAGE1_CHECKPOINT), &after)?;
    write_stage1_curve(&out.join("stage1_curve.csv"), &log.curve)?;

    let row = |r: &trainer::Stage1Row| json!({ "L_emo": r.emotion, "L_cog": r.cognition, "L1": r.total });
    let mut r = new_report("train");
    r.insert("stage".into(), json!(1));
    r.insert("config".into(), config_value(cfg));
    r.insert("epochs".into(), json!(tc.epochs));
    r.insert("steps".into(), json!(log.optimizer.steps()));
    r.insert("initial".into(), row(&log.curve[0]));
    r.insert("final".into(), row(log.curve.last().expect("row 0")));
    r.insert(
        "trainable".into(),
        json!(Stage::One.trainable().iter().map(|g| g.name()).collect::<Vec<_>>()),
    );
    r.insert("hashes_before".into(), group_hashes(&before));
    r.insert("hashes_after".into(), group_hashes(&after));
    for split in [Split::Val, Split::Test] {
        let s = ds.split(split);
        if s.len() >= 2 {
            let mut v = embedding_summary(&params, &s, cfg)?;
            let l = trainer::evaluate_stage1(&params, &s, &tc)?;
            v["L1"] = json!(l.total);
            r.insert(split.name().into(), v);
        }
    }
    write_report(out, "stage1_report.json", &r)?;
    Ok(r)
}

/// Stage 2: caption alignment through the frozen decoder.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    decoder: Option<&Path>,
    out: &Path,
) -> Result<Report> {
    let seed = cfg.require_seed()?;
    let checkpoint =
        checkpoint.ok_or_else(|| CliError::Config("stage 2 requires --checkpoint (a stage-1 checkpoint)".into()))?;
    let decoder =
        decoder.ok_or_else(|| CliError::Config("stage 2 requires --decoder (a pretrained decoder)".into()))?;
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let train = need_split(&ds, Split::Train, 2, "stage 2")?;
    let bcfg = cfg.bridge_for(dims_of(&ds)?);
    let mut bridge = load_bridge(checkpoint, &bcfg)?;
    let (dec, dcfg) = load_decoder(decoder)?;
    if dec.vocab_size() != ds.vocab.len() {
        return Err(CliError::format(
            decoder,
            "decoder.tok_emb",
            format!(
                "decoder vocab has {} tokens, dataset vocab {}",
                dec.vocab_size(),
                ds.vocab.len()
            ),
        ));
    }
    let prompt = prompt_ids(cfg, &ds.vocab)?;
    let mut prefix = PrefixBridges::init(bcfg.d_e, bcfg.d_c, dcfg.d_model, seed);

    let mut before = NamedTensors::new();
    named_map(&bridge, "", &mut before);
    named_map(&prefix, "prefix", &mut before);
    named_map(&dec, "decoder", &mut before);
    let tc = cfg.train_config(cfg.stage2_epochs);
    let log = trainer::train_stage2(&mut bridge, &mut prefix, &dec, &train, &prompt, &tc)?;
    let mut after = NamedTensors::new();
    named_map(&bridge, "", &mut after);
    named_map(&prefix, "prefix", &mut after);
    let ckpt = after.clone();
    named_map(&dec, "decoder", &mut after);

    formats::write_checkpoint(&out.join(STAGE2_CHECKPOINT), &ckpt)?;
    write_caption_curve(&out.join("stage2_curve.csv"), "L2", &log.curve)?;

    let mut r = new_report("train");
    r.insert("stage".into(), json!(2));
    r.insert("config".into(), config_value(cfg));
    r.insert("epochs".into(), json!(tc.epochs));
    r.insert("steps".into(), json!(log.optimizer.steps()));
    r.insert("initial_L2".into(), json!(log.curve[0].loss));
    r.insert("final_L2".into(), json!(log.curve.last().expect("row 0").loss));
    r.insert(
        "trainable".into(),
        json!(Stage::Two.trainable().iter().map(|g| g.name()).collect::<Vec<_>>()),
    );
    r.insert(
        "frozen".into(),
        json!(Stage::Two.frozen().iter().map(|g| g.name()).collect::<Vec<_>>()),
    );
    r.insert("hashes_before".into(), group_hashes(&before));
    r.insert("hashes_after".into(), group_hashes(&after));
    let dec_hash = |m: &NamedTensors| sha256_hex(&group_bytes(m, ParamGroup::Decoder));
    r.insert("decoder_unchanged".into(), json!(dec_hash(&before) == dec_hash(&after)));
    for split in [Split::Val, Split::Test] {
        let s = ds.split(split);
        if s.len() >= 2 {
            let l = trainer::evaluate_stage2(&bridge, &prefix, &dec, &s, &prompt, &tc)?;
            r.insert(split.name().into(), json!({ "n": s.len(), "L2": l }));
        }
    }
    write_report(out, "stage2_report.json", &r)?;
    Ok(r)
}

/// Greedy captions for one split, scored against the gold captions.
pub fn decode(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    decoder: &Path,
    split: Split,
    out: &Path,
) -> Result<Report> {
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let samples = need_split(&ds, split, 1, "decode")?;
    let bcfg = cfg.bridge_for(dims_of(&ds)?);
    let bridge = load_bridge(checkpoint, &bcfg)?;
    let (dec, dcfg) = load_decoder(decoder)?;
    let prefix = load_prefix(checkpoint, &bcfg, dcfg.d_model)?;
    let prompt = prompt_ids(cfg, &ds.vocab)?;
    let generated = trainer::generate_captions(
        &bridge,
        &prefix,
        &dec,
        &samples,
        &prompt,
        cfg.modalities,
        cfg.decode_max_len,
    )?;
    let gold: Vec<&[usize]> = samples.iter().map(|s| s.caption.as_slice()).collect();
    let accuracy = trainer::corpus_token_accuracy(&generated, &gold);

    let cands: Vec<String> = generated.iter().map(|g| caption_line(&ds.vocab, g)).collect();
    let refs: Vec<String> = samples.iter().map(|s| caption_line(&ds.vocab, &s.caption)).collect();
    let lines = |v: &[String]| v.iter().map(|l| format!("{l}\n")).collect::<String>();
    formats::write_bytes(&out.join(CANDIDATES), lines(&cands).as_bytes())?;
    formats::write_bytes(&out.join(REFERENCES), lines(&refs).as_bytes())?;
    let exact = cands.iter().zip(&refs).filter(|(c, r)| c == r).count();

    let mut r = new_report("decode");
    r.insert("split".into(), json!(split.name()));
    r.insert("n".into(), json!(samples.len()));
    r.insert("token_accuracy".into(), json!(accuracy));
    r.insert("exact_match".into(), json!(exact as f64 / samples.len() as f64));
    r.insert("scores".into(), scores_value(&cands, &[refs])?);
    write_report(out, "decode_report.json", &r)?;
    Ok(r)
}

fn scores_value(cands: &[String], refs: &[Vec<String>]) -> Result<Value> {
    let pairs = (0..cands.len())
        .map(|i| {
            let rs: Vec<&str> = refs.iter().map(|r| r[i].as_str()).collect();
            TokenizedPair::from_text(&cands[i], &rs)
        })
        .collect::<ecmc_core::Result<Vec<_>>>()?;
    let s = caption_scores(&pairs)?;
    Ok(json!({
        "bleu1": s.bleu1,
        "bleu2": s.bleu2,
        "bleu4": s.bleu4,
        "rougeL": s.rouge_l,
        "cider": s.cider,
        "n_pairs": s.n_pairs,
        "warnings": s.warnings,
    }))
}

/// Embedding geometry of one split under a bridge checkpoint.
pub fn eval_embeddings(cfg: &RunConfig, data: &Path, checkpoint: &Path, split: Split) -> Result<Report> {
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let samples = need_split(&ds, split, 2, "eval embeddings")?;
    let bcfg = cfg.bridge_for(dims_of(&ds)?);
    let params = load_bridge(checkpoint, &bcfg)?;
    let mut r = new_report("eval embeddings");
    r.insert("split".into(), json!(split.name()));
    r.insert("modalities".into(), json!(cfg.modalities.label()));
    r.insert("embeddings".into(), embedding_summary(&params, &samples, cfg)?);
    Ok(r)
}

/// Scores a candidate file against one or more line-aligned reference files.
pub fn eval_captions(cand: &Path, refs: &[PathBuf]) -> Result<Report> {
    if refs.is_empty() {
        return Err(CliError::Config("eval captions needs at least one --ref".into()));
    }
    let cands = formats::read_lines(cand)?;
    if cands.is_empty() {
        return Err(CliError::format(cand, "line 1", "no candidate captions"));
    }
    let mut ref_lines = Vec::with_capacity(refs.len());
    for p in refs {
        let lines = formats::read_lines(p)?;
        if lines.len() != cands.len() {
            return Err(CliError::format(
                p,
                format!("line {}", lines.len().min(cands.len()) + 1),
                format!("{} references for {} candidates", lines.len(), cands.len()),
            ));
        }
        ref_lines.push(lines);
    }
    let mut r = new_report("eval captions");
    r.insert("scores".into(), scores_value(&cands, &ref_lines)?);
    Ok(r)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableUtterance {
    subject: String,
    negative: bool,
    #[serde(default)]
    cognition: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    subjects: BTreeMap<String, String>,
    utterances: Vec<TableUtterance>,
}

/// Parses a group table: `{"subjects": {id: group}, "utterances": [{subject, negative, cognition}]}`.
pub fn read_group_table(path: &Path) -> Result<GroupLabelTable> {
    let text = formats::read_text(path)?;
    let raw: TableFile = serde_json::from_str(&text)
        .map_err(|e| CliError::format(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    let mut table = GroupLabelTable::default();
    for (id, g) in raw.subjects {
        let group = Group::from_name(&g)
            .ok_or_else(|| CliError::format(path, format!("subjects.{id}"), format!("unknown group {g:?}")))?;
        table.subjects.insert(id, group);
    }
    for (i, u) in raw.utterances.into_iter().enumerate() {
        let mut cognition = CognitionSet::EMPTY;
        for c in &u.cognition {
            let cat = CognitionCategory::from_name(c).ok_or_else(|| {
                CliError::format(
                    path,
                    format!("utterances[{i}].cognition"),
                    format!("unknown category {c:?}"),
                )
            })?;
            cognition.insert(cat);
        }
        table.utterances.push((
            u.subject,
            UtteranceFlags {
                negative: u.negative,
                cognition,
            },
        ));
    }
    Ok(table)
}

/// Per-group label proportions with equal weight per subject.
pub fn eval_stats(table_path: &Path) -> Result<Report> {
    let table = read_group_table(table_path)?;
    let props = group_proportions(&table).map_err(|e| CliError::format(table_path, "utterances", e.to_string()))?;
    let mut groups = Map::new();
    for (g, s) in &props.groups {
        groups.insert(
            g.name().into(),
            json!({ "n_subjects": s.n_subjects, "proportions": rates_value(s.proportions) }),
        );
    }
    let mut r = new_report("eval stats");
    r.insert("groups".into(), Value::Object(groups));
    r.insert("warnings".into(), json!(props.warnings));
    Ok(r)
}

/// Runs the gradient suite. The report lists every check; `failed` names
/// the ones at or above `tol`.
pub fn gradcheck(seed: u64, tol: f64, fault: Option<OpKind>) -> Result<(Report, Vec<String>)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(CliError::Config(format!("tol: must be > 0, got {tol}")));
    }
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::default()
    };
    let entries = run_suite(seed, opts)?;
    let mut checks = Map::new();
    let mut failed = Vec::new();
    for e in &entries {
        let pass = e.passes(tol);
        if !pass {
            failed.push(e.name.to_owned());
        }
        checks.insert(
            e.name.into(),
            json!({ "max_rel_error": e.report.max_rel_error, "entries": e.report.entries, "pass": pass }),
        );
    }
    let mut r = new_report("gradcheck");
    r.insert("seed".into(), json!(seed));
    r.insert("tol".into(), json!(tol));
    r.insert("checks".into(), Value::Object(checks));
    r.insert("failed".into(), json!(failed));
    Ok((r, failed))
}
