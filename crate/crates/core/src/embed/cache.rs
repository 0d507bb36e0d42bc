use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::EmbedError;
use crate::artifact::sha256_hex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    tag: String,
    hash: String,
    vector: Vec<f64>,
}

/// Embedding cache keyed by (provider tag, SHA-256 of the prompt text).
/// Backed by an append-only JSON-lines file when opened from disk.
pub struct EmbeddingCache {
    tag: String,
    entries: HashMap<String, Vec<f64>>,
    dim: Option<usize>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

pub fn prompt_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

impl EmbeddingCache {
    pub fn in_memory(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            entries: HashMap::new(),
            dim: None,
            file: None,
        }
    }

    /// Loads `path` if it exists; unreadable or foreign records are dropped
    /// with a warning.
    pub fn open(path: &Path, tag: impl Into<String>) -> Result<Self, EmbedError> {
        let mut cache = Self::in_memory(tag);
        let io = |source| EmbedError::Cache {
            path: path.to_owned(),
            source,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) if r.tag == cache.tag && r.vector.iter().all(|x| x.is_finite()) => {
                        if cache.dim.is_some_and(|d| d != r.vector.len()) {
                            warn!("{}:{}: vector dimension differs, record dropped", path.display(), n + 1);
                            continue;
                        }
                        cache.dim = Some(r.vector.len());
                        cache.entries.insert(r.hash, r.vector);
                    }
                    _ => warn!("{}:{}: corrupt cache record dropped", path.display(), n + 1),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        cache.file = Some((path.to_owned(), BufWriter::new(file)));
        Ok(cache)
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, hash: &str) -> Option<&[f64]> {
        self.entries.get(hash).map(Vec::as_slice)
    }

    pub fn insert(&mut self, hash: String, vector: Vec<f64>) -> Result<(), EmbedError> {
        match self.dim {
            Some(d) if d != vector.len() => {
                return Err(EmbedError::DimensionMismatch {
                    cached: d,
                    provider: vector.len(),
                })
            }
            _ => self.dim = Some(vector.len()),
        }
        if let Some((path, out)) = &mut self.file {
            let record = CacheRecord {
                tag: self.tag.clone(),
                hash: hash.clone(),
                vector: vector.clone(),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(out, "{line}").map_err(|source| EmbedError::Cache {
                path: path.clone(),
                source,
            })?;
        }
        self.entries.insert(hash, vector);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), EmbedError> {
        if let Some((path, out)) = &mut self.file {
            out.flush().map_err(|source| EmbedError::Cache {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

impl Drop for EmbeddingCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
