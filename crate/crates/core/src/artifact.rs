//! On-disk helpers shared by every stage: JSON-lines files, pretty JSON
//! documents and binary blobs behind a one-line JSON header.
//!
//! A binary artifact is a single JSON header line terminated by `\n`, followed
//! by the little-endian payload. The header carries the SHA-256 of the payload
//! and readers reject files whose checksum does not match.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{}: {reason}", path.display())]
    Invalid { path: PathBuf, reason: String },
    #[error("{} does not exist; run `star {step}` first", path.display())]
    Missing { path: PathBuf, step: &'static str },
}

impl ArtifactError {
    pub(crate) fn invalid(path: &Path, reason: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.to_owned(),
            reason: reason.into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fails with an error naming the stage that produces `path` when it is absent.
pub fn require(path: &Path, step: &'static str) -> Result<(), ArtifactError> {
    if path.exists() {
        Ok(())
    } else {
        Err(ArtifactError::Missing {
            path: path.to_owned(),
            step,
        })
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>, ArtifactError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn open(path: &Path) -> Result<BufReader<File>, ArtifactError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<(), ArtifactError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = create(path)?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|source| ArtifactError::Json {
            path: path.to_owned(),
            line: 0,
            source,
        })?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ArtifactError> {
    let reader = open(path)?;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| ArtifactError::Json {
            path: path.to_owned(),
            line: idx + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Pretty JSON with a trailing newline. Output is byte-stable for equal values.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|source| ArtifactError::Json {
        path: path.to_owned(),
        line: 0,
        source,
    })?;
    writeln!(out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    serde_json::from_reader(open(path)?).map_err(|source| ArtifactError::Json {
        path: path.to_owned(),
        line: 0,
        source,
    })
}

/// Header line of a binary artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub layout: String,
    /// Number of rows.
    pub n: usize,
    /// Number of columns when it differs from `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<usize>,
    #[serde(default)]
    pub topk: Option<usize>,
    pub payload_bytes: usize,
    pub checksum: String,
}

pub const BIN_FORMAT: &str = "star-matrix";

pub fn write_binary(path: &Path, mut header: BinHeader, payload: &[u8]) -> Result<(), ArtifactError> {
    header.payload_bytes = payload.len();
    header.checksum = sha256_hex(payload);
    let mut out = create(path)?;
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(out, "{line}").map_err(io_err(path))?;
    out.write_all(payload).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn read_binary(path: &Path) -> Result<(BinHeader, Vec<u8>), ArtifactError> {
    let mut reader = open(path)?;
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(io_err(path))?;
    let header: BinHeader = serde_json::from_slice(&line).map_err(|source| ArtifactError::Json {
        path: path.to_owned(),
        line: 1,
        source,
    })?;
    if header.format != BIN_FORMAT {
        return Err(ArtifactError::invalid(path, format!("unknown format {}", header.format)));
    }
    let mut payload = Vec::with_capacity(header.payload_bytes);
    reader.read_to_end(&mut payload).map_err(io_err(path))?;
    if payload.len() != header.payload_bytes || sha256_hex(&payload) != header.checksum {
        return Err(ArtifactError::invalid(path, "payload checksum mismatch"));
    }
    Ok((header, payload))
}

/// Little-endian cursor over a binary payload.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        chunk.try_into().ok()
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
