//! Binary matrix (`ECMF`) and checkpoint (`ECMB`) containers, CSV matrices
//! and the plain-text vocab and caption files.
//!
//! Both binary formats are little-endian: a 4-byte magic, a `u32` version,
//! then the payload. Matrices store `rows`, `cols` and row-major `f64`
//! values. Checkpoints store named sections (`u32` name length, UTF-8 name,
//! `u32` rows, `u32` cols, values) until end of file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ecmc_core::decoder::{Vocab, EOS};
use ecmc_core::Tensor;

use crate::error::{CliError, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"ECMF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECMB";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensors = BTreeMap<String, Tensor>;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn err(&self, detail: impl Into<String>) -> CliError {
        CliError::format(self.path, format!("byte {}", self.pos), detail)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            self.pos = 0;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {v}, expected {FORMAT_VERSION}")));
        }
        Ok(())
    }

    fn matrix_body(&mut self) -> Result<Tensor> {
        let rows = self.u32("row count")? as usize;
        let cols = self.u32("column count")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| self.err(format!("matrix {rows}x{cols} is too large")))?;
        let start = self.pos;
        let raw = self.take(n, "matrix values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            self.pos = start + 8 * i;
            return Err(self.err("non-finite value"));
        }
        Ok(Tensor::new(rows, cols, data).expect("length checked"))
    }
}

fn put_matrix(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
}

pub fn encode_matrix(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_matrix(&mut out, t);
    out
}

/// `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    r.header(MATRIX_MAGIC)?;
    let t = r.matrix_body()?;
    if !r.at_end() {
        return Err(r.err("trailing bytes after matrix"));
    }
    Ok(t)
}

pub fn encode_checkpoint(tensors: &NamedTensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_matrix(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NamedTensors> {
    let mut r = Reader::new(bytes, path);
    r.header(CHECKPOINT_MAGIC)?;
    let mut out = BTreeMap::new();
    while !r.at_end() {
        let start = r.pos;
        let len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| r.err("section name is not UTF-8"))?
            .to_owned();
        let t = r.matrix_body()?;
        if out.insert(name.clone(), t).is_some() {
            r.pos = start;
            return Err(r.err(format!("duplicate section {name:?}")));
        }
    }
    Ok(out)
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_matrix(t))
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn write_checkpoint(path: &Path, tensors: &NamedTensors) -> Result<()> {
    write_bytes(path, &encode_checkpoint(tensors))
}

pub fn read_checkpoint(path: &Path) -> Result<NamedTensors> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Comma-separated rows without a header. Values print in shortest
/// round-trip form, so CSV matrices are also lossless.
pub fn write_csv_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| CliError::io(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e))?;
    write_bytes(path, &bytes)
}

pub fn read_csv_matrix(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes.as_slice());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let loc = e.position().map_or("unknown".into(), |p| format!("line {}", p.line()));
            CliError::format(path, loc, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::format(path, format!("line {line}"), format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows).map_err(|e| CliError::format(path, "rows", e.to_string()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// One token per line; the line number is the id.
pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    Vocab::new(text.lines().map(str::to_owned).collect()).map_err(|e| CliError::format(path, "vocab", e.to_string()))
}

pub fn vocab_text(vocab: &Vocab) -> String {
    vocab.tokens().iter().map(|t| format!("{t}\n")).collect()
}

/// One caption per line, whitespace-tokenized; each gains a trailing EOS.
pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut ids = vocab
                .encode(l)
                .map_err(|e| CliError::format(path, format!("line {}", i + 1), e.to_string()))?;
            ids.push(EOS);
            Ok(ids)
        })
        .collect()
}

/// Caption text without the trailing EOS.
pub fn caption_line(vocab: &Vocab, ids: &[usize]) -> String {
    let body = match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => ids,
    };
    vocab.decode(body)
}

/// Non-empty lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_owned).collect())
}
