//! Item-item similarity matrices.
//!
//! Full matrices are stored as their packed upper triangle, which makes them
//! exactly symmetric. Sparse matrices (collaborative, or semantic after top-K
//! truncation) store per-row `(column, value)` lists sorted by column.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, ArtifactError, BinHeader, PayloadReader, BIN_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Semantic,
    Collaborative,
}

impl SimilarityKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Semantic => "semantic",
            Self::Collaborative => "collaborative",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Packed(Vec<f64>),
    Sparse(Vec<Vec<(u32, f64)>>),
}

/// Read access to an n×n item relation, as consumed by the scoring rule.
pub trait Relation {
    fn size(&self) -> usize;

    fn value(&self, row: usize, col: usize) -> f64;

    /// `acc[x] += weight * value(x, col)` for every row `x`.
    fn add_column(&self, col: usize, weight: f64, acc: &mut [f64]) {
        for (x, slot) in acc.iter_mut().enumerate() {
            *slot += weight * self.value(x, col);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    kind: SimilarityKind,
    topk: Option<usize>,
    symmetric: bool,
    storage: Storage,
}

fn packed_offset(n: usize, row: usize) -> usize {
    row * (2 * n - row + 1) / 2
}

impl SimilarityMatrix {
    /// Builds a full symmetric matrix from `f(i, j)` evaluated for `i <= j`.
    pub fn from_upper<F>(n: usize, kind: SimilarityKind, f: F) -> Self
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        use rayon::prelude::*;
        let mut values = vec![0.0; n * (n + 1) / 2];
        let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
        let mut rest = values.as_mut_slice();
        for i in 0..n {
            let (row, tail) = rest.split_at_mut(n - i);
            rows.push((i, row));
            rest = tail;
        }
        rows.into_par_iter().for_each(|(i, row)| {
            for (slot, j) in row.iter_mut().zip(i..n) {
                *slot = f(i, j);
            }
        });
        Self {
            n,
            kind,
            topk: None,
            symmetric: true,
            storage: Storage::Packed(values),
        }
    }

    /// Builds a sparse matrix. Rows are sorted by column; zero entries are kept
    /// only if present in the input.
    pub fn from_sparse_rows(
        kind: SimilarityKind,
        mut rows: Vec<Vec<(u32, f64)>>,
        topk: Option<usize>,
        symmetric: bool,
    ) -> Self {
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
        }
        Self {
            n: rows.len(),
            kind,
            topk,
            symmetric,
            storage: Storage::Sparse(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn topk(&self) -> Option<usize> {
        self.topk
    }

    /// True unless rows were truncated independently.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.n && col < self.n, "index ({row}, {col}) out of range for {}", self.n);
        match &self.storage {
            Storage::Packed(values) => {
                let (i, j) = if row <= col { (row, col) } else { (col, row) };
                values[packed_offset(self.n, i) + (j - i)]
            }
            Storage::Sparse(rows) => {
                let r = &rows[row];
                r.binary_search_by_key(&(col as u32), |&(c, _)| c)
                    .map(|p| r[p].1)
                    .unwrap_or(0.0)
            }
        }
    }

    /// Stored entries of one row. Full matrices yield every column.
    pub fn row(&self, row: usize) -> Vec<(usize, f64)> {
        match &self.storage {
            Storage::Packed(_) => (0..self.n).map(|j| (j, self.get(row, j))).collect(),
            Storage::Sparse(rows) => rows[row].iter().map(|&(c, v)| (c as usize, v)).collect(),
        }
    }

    /// Number of explicitly stored values.
    pub fn stored_entries(&self) -> usize {
        match &self.storage {
            Storage::Packed(v) => v.len(),
            Storage::Sparse(rows) => rows.iter().map(Vec::len).sum(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        let (layout, payload) = match &self.storage {
            Storage::Packed(values) => (
                "packed-upper",
                values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>(),
            ),
            Storage::Sparse(rows) => {
                let mut bytes = Vec::new();
                for row in rows {
                    bytes.extend((row.len() as u32).to_le_bytes());
                    for &(c, v) in row {
                        bytes.extend(c.to_le_bytes());
                        bytes.extend(v.to_le_bytes());
                    }
                }
                (if self.symmetric { "sparse-rows" } else { "sparse-rows-asym" }, bytes)
            }
        };
        let header = BinHeader {
            format: BIN_FORMAT.into(),
            version: 1,
            kind: self.kind.as_str().into(),
            layout: layout.into(),
            n: self.n,
            columns: None,
            topk: self.topk,
            payload_bytes: 0,
            checksum: String::new(),
        };
        artifact::write_binary(path, header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let (header, payload) = artifact::read_binary(path)?;
        let kind = match header.kind.as_str() {
            "semantic" => SimilarityKind::Semantic,
            "collaborative" => SimilarityKind::Collaborative,
            other => return Err(ArtifactError::invalid(path, format!("not a similarity matrix: {other}"))),
        };
        let n = header.n;
        let mut cursor = PayloadReader::new(&payload);
        let bad = || ArtifactError::invalid(path, "truncated payload");
        let matrix = match header.layout.as_str() {
            "packed-upper" => {
                let len = n * (n + 1) / 2;
                let values = (0..len).map(|_| cursor.f64().ok_or_else(bad)).collect::<Result<_, _>>()?;
                Self {
                    n,
                    kind,
                    topk: header.topk,
                    symmetric: true,
                    storage: Storage::Packed(values),
                }
            }
            layout @ ("sparse-rows" | "sparse-rows-asym") => {
                let mut rows = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = cursor.u32().ok_or_else(bad)? as usize;
                    let mut row = Vec::with_capacity(len);
                    for _ in 0..len {
                        let c = cursor.u32().ok_or_else(bad)?;
                        let v = cursor.f64().ok_or_else(bad)?;
                        if c as usize >= n {
                            return Err(ArtifactError::invalid(path, "column out of range"));
                        }
                        row.push((c, v));
                    }
                    rows.push(row);
                }
                Self {
                    n,
                    kind,
                    topk: header.topk,
                    symmetric: layout == "sparse-rows",
                    storage: Storage::Sparse(rows),
                }
            }
            other => return Err(ArtifactError::invalid(path, format!("unknown layout {other}"))),
        };
        if !cursor.is_done() {
            return Err(ArtifactError::invalid(path, "trailing bytes in payload"));
        }
        Ok(matrix)
    }
}

impl Relation for SimilarityMatrix {
    fn size(&self) -> usize {
        self.n
    }

    fn value(&self, row: usize, col: usize) -> f64 {
        self.get(row, col)
    }

    fn add_column(&self, col: usize, weight: f64, acc: &mut [f64]) {
        match &self.storage {
            Storage::Packed(values) => {
                for (x, slot) in acc.iter_mut().enumerate().take(col) {
                    *slot += weight * values[packed_offset(self.n, x) + (col - x)];
                }
                let start = packed_offset(self.n, col);
                for (slot, v) in acc[col..].iter_mut().zip(&values[start..start + self.n - col]) {
                    *slot += weight * v;
                }
            }
            // column col equals row col when the matrix is symmetric
            Storage::Sparse(rows) if self.symmetric => {
                for &(x, v) in &rows[col] {
                    acc[x as usize] += weight * v;
                }
            }
            Storage::Sparse(_) => {
                for (x, slot) in acc.iter_mut().enumerate() {
                    *slot += weight * self.get(x, col);
                }
            }
        }
    }
}
