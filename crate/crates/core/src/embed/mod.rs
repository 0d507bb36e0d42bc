//! Item embeddings and the semantic similarity matrix.

mod cache;
mod prompt;
mod provider;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

pub use cache::{prompt_hash, EmbeddingCache};
pub use prompt::{build_item_prompt, ItemPrompt, DEFAULT_PROMPT_BUDGET};
pub use provider::{EmbeddingProvider, EmbeddingProviderSpec, HashingEmbedder, HttpEmbedder, ProviderKind};

use crate::artifact::{self, ArtifactError, BinHeader, PayloadReader, BIN_FORMAT};
use crate::http::HttpError;
use crate::matrix::{SimilarityKind, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("item {item} has no usable metadata fields")]
    EmptyMetadata { item: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("provider returned {provider}-dimensional vectors but the cache holds {cached}-dimensional ones")]
    DimensionMismatch { cached: usize, provider: usize },
    #[error("embedding cache {}: {source}", path.display())]
    Cache { path: PathBuf, source: std::io::Error },
    #[error("{} items could not be embedded (first: {:?}); successful batches are cached, rerun to resume", missing.len(), missing.first())]
    Incomplete { missing: Vec<usize>, last_error: String },
    #[error(transparent)]
    Provider(#[from] HttpError),
}

/// Row-major n × dim embedding matrix, one row per catalog item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Vec<f64>,
    n: usize,
    dim: usize,
    provider_tag: String,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, provider_tag: impl Into<String>) -> Result<Self, EmbedError> {
        let n = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(EmbedError::LengthMismatch(dim, bad.len()));
        }
        Ok(Self {
            values: rows.concat(),
            n,
            dim,
            provider_tag: provider_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    /// Stores the matrix as a dense binary artifact; the provider tag goes in
    /// the header's `kind` suffix.
    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        let payload: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = BinHeader {
            format: BIN_FORMAT.into(),
            version: 1,
            kind: format!("embeddings:{}", self.provider_tag),
            layout: "dense".into(),
            n: self.n,
            columns: Some(self.dim),
            topk: None,
            payload_bytes: 0,
            checksum: String::new(),
        };
        artifact::write_binary(path, header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let (header, payload) = artifact::read_binary(path)?;
        let Some(tag) = header.kind.strip_prefix("embeddings:") else {
            return Err(ArtifactError::invalid(path, format!("expected embeddings, found {}", header.kind)));
        };
        let dim = header.columns.unwrap_or(0);
        if header.layout != "dense" || payload.len() != header.n * dim * 8 {
            return Err(ArtifactError::invalid(path, "payload does not match the declared shape"));
        }
        let mut cursor = PayloadReader::new(&payload);
        let values = (0..header.n * dim).map(|_| cursor.f64().expect("length checked")).collect();
        Ok(Self { values, n: header.n, dim, provider_tag: tag.to_string() })
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.values[item * self.dim..(item + 1) * self.dim]
    }
}

/// Cosine similarity. Zero-norm inputs have similarity 0 with everything.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Embeds every prompt, serving hits from `cache` and sending misses to the
/// provider in batches of `batch_size` over up to `fan_out` concurrent
/// requests. Items without a prompt get a zero row.
pub fn embed_items(
    provider: &dyn EmbeddingProvider,
    prompts: &[ItemPrompt],
    n_items: usize,
    cache: &mut EmbeddingCache,
    batch_size: usize,
    fan_out: usize,
) -> Result<EmbeddingMatrix, EmbedError> {
    let hashes: Vec<String> = prompts.iter().map(|p| prompt_hash(&p.text)).collect();
    let mut seen = HashSet::new();
    let misses: Vec<(String, String)> = prompts
        .iter()
        .zip(&hashes)
        .filter(|(_, h)| cache.get(h).is_none() && seen.insert(h.as_str()))
        .map(|(p, h)| (h.clone(), p.text.clone()))
        .collect();
    info!("{} prompts, {} cache misses", prompts.len(), misses.len());

    let batches: Vec<&[(String, String)]> = misses.chunks(batch_size.max(1)).collect();
    let mut failed: HashSet<String> = HashSet::new();
    let mut last_error = String::new();
    if !batches.is_empty() {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        thread::scope(|scope| -> Result<(), EmbedError> {
            for _ in 0..fan_out.clamp(1, batches.len()) {
                let tx = tx.clone();
                let next = &next;
                let batches = &batches;
                scope.spawn(move || loop {
                    let b = next.fetch_add(1, Ordering::SeqCst);
                    let Some(batch) = batches.get(b) else { break };
                    let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
                    let result = provider.embed_batch(&texts);
                    if tx.send((b, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // single writer: only this thread touches the cache
            for (b, result) in rx {
                let batch = batches[b];
                match result {
                    Ok(vectors) if vectors.len() == batch.len() => {
                        for ((hash, _), vector) in batch.iter().zip(vectors) {
                            cache.insert(hash.clone(), vector)?;
                        }
                    }
                    Ok(vectors) => {
                        last_error = format!("batch of {} returned {} vectors", batch.len(), vectors.len());
                        failed.extend(batch.iter().map(|(h, _)| h.clone()));
                    }
                    Err(err) => {
                        warn!("embedding batch {b} failed: {err}");
                        last_error = err.to_string();
                        failed.extend(batch.iter().map(|(h, _)| h.clone()));
                    }
                }
            }
            Ok(())
        })?;
        cache.flush()?;
    }

    if !failed.is_empty() {
        let mut missing: Vec<usize> = prompts
            .iter()
            .zip(&hashes)
            .filter(|(_, h)| failed.contains(*h))
            .map(|(p, _)| p.item)
            .collect();
        missing.sort_unstable();
        return Err(EmbedError::Incomplete { missing, last_error });
    }

    let dim = cache.dim().unwrap_or(0);
    let mut rows = vec![vec![0.0; dim]; n_items];
    for (p, h) in prompts.iter().zip(&hashes) {
        rows[p.item] = cache.get(h).expect("every prompt is cached").to_vec();
    }
    EmbeddingMatrix::from_rows(rows, provider.tag())
}

fn normalized_rows(e: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..e.len())
        .map(|i| {
            let row = e.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Item-item cosine matrix of the embeddings. With `topk`, each row keeps its
/// diagonal plus its `topk` largest off-diagonal entries (ties to the lower
/// column) and everything else becomes zero.
pub fn semantic_similarity(e: &EmbeddingMatrix, topk: Option<usize>) -> SimilarityMatrix {
    let rows = normalized_rows(e);
    let nonzero: Vec<bool> = rows.iter().map(|r| r.iter().any(|&x| x != 0.0)).collect();
    let sim = |i: usize, j: usize| -> f64 {
        if i == j {
            if nonzero[i] {
                1.0
            } else {
                0.0
            }
        } else {
            dot(&rows[i], &rows[j]).clamp(-1.0, 1.0)
        }
    };
    let n = e.len();
    match topk {
        None => SimilarityMatrix::from_upper(n, SimilarityKind::Semantic, sim),
        Some(k) => {
            let truncated: Vec<Vec<(u32, f64)>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut others: Vec<(u32, f64)> =
                        (0..n).filter(|&j| j != i).map(|j| (j as u32, sim(i, j))).collect();
                    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    others.truncate(k);
                    others.push((i as u32, sim(i, i)));
                    others
                })
                .collect();
            SimilarityMatrix::from_sparse_rows(SimilarityKind::Semantic, truncated, Some(k), false)
        }
    }
}
