//! Collaborative signals from training interactions: the binary item × user
//! incidence, its item-item cosine matrix, popularity and co-occurrence counts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{self, ArtifactError, BinHeader, PayloadReader, BIN_FORMAT};
use crate::corpus::SplitDataset;
use crate::matrix::{SimilarityKind, SimilarityMatrix};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CollabError {
    #[error("item index {index} out of range for {items} items")]
    InvalidItem { index: usize, items: usize },
}

/// Which interactions feed the collaborative statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountScope {
    #[default]
    Train,
    TrainValidation,
}

impl std::str::FromStr for CountScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "train-validation" | "train+val" => Ok(Self::TrainValidation),
            other => Err(format!("unknown count split `{other}` (train|train-validation)")),
        }
    }
}

/// Binary item × user incidence. Each row lists the users who interacted with
/// the item, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseInteractionMatrix {
    n_users: usize,
    rows: Vec<Vec<u32>>,
}

impl SparseInteractionMatrix {
    /// Builds the incidence from (item, user) pairs; repeated pairs collapse.
    pub fn from_pairs(n_items: usize, n_users: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows = vec![Vec::new(); n_items];
        for (item, user) in pairs {
            assert!(user < n_users, "user {user} out of range");
            rows[item].push(user as u32);
        }
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
        }
        Self { n_users, rows }
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn users_of(&self, item: usize) -> &[u32] {
        &self.rows[item]
    }

    fn check(&self, item: usize) -> Result<(), CollabError> {
        if item < self.rows.len() {
            Ok(())
        } else {
            Err(CollabError::InvalidItem {
                index: item,
                items: self.rows.len(),
            })
        }
    }

    /// Number of distinct users who interacted with `item`.
    pub fn popularity(&self, item: usize) -> Result<usize, CollabError> {
        self.check(item)?;
        Ok(self.rows[item].len())
    }

    /// Number of distinct users who interacted with both items.
    pub fn co_count(&self, a: usize, b: usize) -> Result<usize, CollabError> {
        self.check(a)?;
        self.check(b)?;
        Ok(intersection_len(&self.rows[a], &self.rows[b]))
    }

    fn transpose(&self) -> Vec<Vec<u32>> {
        let mut users = vec![Vec::new(); self.n_users];
        for (item, row) in self.rows.iter().enumerate() {
            for &u in row {
                users[u as usize].push(item as u32);
            }
        }
        users
    }

    pub fn write(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut payload = Vec::new();
        for row in &self.rows {
            payload.extend((row.len() as u32).to_le_bytes());
            for u in row {
                payload.extend(u.to_le_bytes());
            }
        }
        let header = BinHeader {
            format: BIN_FORMAT.into(),
            version: 1,
            kind: "counts".into(),
            layout: "incidence-rows".into(),
            n: self.rows.len(),
            columns: Some(self.n_users),
            topk: None,
            payload_bytes: 0,
            checksum: String::new(),
        };
        artifact::write_binary(path, header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let (header, payload) = artifact::read_binary(path)?;
        if header.kind != "counts" {
            return Err(ArtifactError::invalid(path, format!("expected counts, found {}", header.kind)));
        }
        let n_users = header.columns.unwrap_or(0);
        let mut cursor = PayloadReader::new(&payload);
        let bad = || ArtifactError::invalid(path, "truncated or invalid payload");
        let mut rows = Vec::with_capacity(header.n);
        for _ in 0..header.n {
            let len = cursor.u32().ok_or_else(bad)? as usize;
            let row = (0..len).map(|_| cursor.u32().ok_or_else(bad)).collect::<Result<Vec<_>, _>>()?;
            if row.windows(2).any(|w| w[0] >= w[1]) || row.last().is_some_and(|&u| u as usize >= n_users) {
                return Err(bad());
            }
            rows.push(row);
        }
        if !cursor.is_done() {
            return Err(bad());
        }
        Ok(Self { n_users, rows })
    }
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Incidence from the training prefixes (and optionally the validation items).
/// Test items never contribute.
pub fn build_interaction_matrix(data: &SplitDataset, scope: CountScope) -> SparseInteractionMatrix {
    let pairs = data.split.iter().flat_map(|u| {
        let validation = (scope == CountScope::TrainValidation).then_some(u.validation.item);
        u.train
            .iter()
            .map(|i| i.item)
            .chain(validation)
            .map(move |item| (item, u.user))
    });
    SparseInteractionMatrix::from_pairs(data.items.len(), data.split.len(), pairs)
}

/// Cosine similarity of incidence rows: |U_i ∩ U_j| / sqrt(|U_i| |U_j|).
/// Items without users have an all-zero row, including the diagonal.
pub fn collaborative_similarity(c: &SparseInteractionMatrix) -> SimilarityMatrix {
    let by_user = c.transpose();
    let n = c.n_items();
    let rows: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::new()),
            |(counts, touched), i| {
                for &u in c.users_of(i) {
                    for &j in &by_user[u as usize] {
                        if counts[j as usize] == 0 {
                            touched.push(j);
                        }
                        counts[j as usize] += 1;
                    }
                }
                let pop_i = c.users_of(i).len() as f64;
                let mut row: Vec<(u32, f64)> = touched
                    .drain(..)
                    .map(|j| {
                        let shared = std::mem::take(&mut counts[j as usize]) as f64;
                        let value = if j as usize == i {
                            1.0
                        } else {
                            let pop_j = c.users_of(j as usize).len() as f64;
                            (shared / (pop_i * pop_j).sqrt()).min(1.0)
                        };
                        (j, value)
                    })
                    .collect();
                row.sort_unstable_by_key(|&(j, _)| j);
                row
            },
        )
        .collect();
    SimilarityMatrix::from_sparse_rows(SimilarityKind::Collaborative, rows, None, true)
}
