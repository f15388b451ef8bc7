//! JSON reports, loss-curve CSVs and content hashes.
//!
//! Reports never contain timestamps or absolute paths, so two runs with the
//! same inputs write identical bytes.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use ecmc_core::trainer::{CaptionRow, Stage1Row};

use crate::error::{CliError, Result};
use crate::formats;

pub const REPORT_SCHEMA: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Starts a report object carrying the schema version and command name.
pub fn new_report(command: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema".into(), json!(REPORT_SCHEMA));
    m.insert("command".into(), json!(command));
    m
}

/// JSON for a number that may be undefined.
pub fn maybe(v: Option<f64>) -> Value {
    v.map_or_else(|| json!("undefined"), |x| json!(x))
}

pub fn render_report(report: &Map<String, Value>) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn write_report(dir: &Path, name: &str, report: &Map<String, Value>) -> Result<PathBuf> {
    let path = dir.join(name);
    formats::write_bytes(&path, render_report(report).as_bytes())?;
    Ok(path)
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::io(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e))?;
    formats::write_bytes(path, &bytes)
}

pub fn write_stage1_curve(path: &Path, curve: &[Stage1Row]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "L_emo", "L_cog", "L1"],
        curve.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.emotion.to_string(),
                r.cognition.to_string(),
                r.total.to_string(),
            ]
        }),
    )
}

pub fn write_caption_curve(path: &Path, column: &str, curve: &[CaptionRow]) -> Result<()> {
    write_csv(
        path,
        &["epoch", column],
        curve.iter().map(|r| vec![r.epoch.to_string(), r.loss.to_string()]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn undefined_values_are_strings() {
        assert_eq!(maybe(None), json!("undefined"));
        assert_eq!(maybe(Some(0.5)), json!(0.5));
    }
}
