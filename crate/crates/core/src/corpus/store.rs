//! Canonical on-disk layout of a prepared dataset directory:
//!
//! ```text
//! train.jsonl  val.jsonl  test.jsonl   {user, item, rating, ts, pos}
//! ids.json                             {users: [...], items: [...]}
//! meta.jsonl                           item metadata keyed by item index
//! stats.json                           DatasetStats
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dataset_stats, IdMap, Interaction, ItemMeta, SplitDataset, SplitUser};
use crate::artifact::{self, ArtifactError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    pub ts: i64,
    /// Position in the user's full chronological sequence.
    pub pos: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdsFile {
    users: Vec<String>,
    items: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaRecord {
    item: usize,
    #[serde(flatten)]
    meta: ItemMeta,
}

fn record(user: usize, pos: usize, i: &Interaction) -> InteractionRecord {
    InteractionRecord {
        user,
        item: i.item,
        rating: i.rating,
        ts: i.timestamp,
        pos,
    }
}

pub fn write_dataset(
    dir: &Path,
    data: &SplitDataset,
    meta: &[Option<ItemMeta>],
) -> Result<(), ArtifactError> {
    let train: Vec<InteractionRecord> = data
        .split
        .iter()
        .flat_map(|u| u.train.iter().enumerate().map(move |(p, i)| record(u.user, p, i)))
        .collect();
    let val: Vec<InteractionRecord> = data
        .split
        .iter()
        .map(|u| record(u.user, u.train.len(), &u.validation))
        .collect();
    let test: Vec<InteractionRecord> = data
        .split
        .iter()
        .map(|u| record(u.user, u.train.len() + 1, &u.test))
        .collect();
    artifact::write_jsonl(&dir.join("train.jsonl"), &train)?;
    artifact::write_jsonl(&dir.join("val.jsonl"), &val)?;
    artifact::write_jsonl(&dir.join("test.jsonl"), &test)?;
    artifact::write_json(
        &dir.join("ids.json"),
        &IdsFile {
            users: data.users.ids().to_vec(),
            items: data.items.ids().to_vec(),
        },
    )?;
    let metas: Vec<MetaRecord> = meta
        .iter()
        .enumerate()
        .filter_map(|(item, m)| m.clone().map(|meta| MetaRecord { item, meta }))
        .collect();
    artifact::write_jsonl(&dir.join("meta.jsonl"), &metas)?;
    artifact::write_json(&dir.join("stats.json"), &dataset_stats(data))
}

fn single_per_user(
    path: &Path,
    records: Vec<InteractionRecord>,
    users: usize,
) -> Result<Vec<InteractionRecord>, ArtifactError> {
    let mut slots: Vec<Option<InteractionRecord>> = vec![None; users];
    for r in records {
        let slot = slots
            .get_mut(r.user)
            .ok_or_else(|| ArtifactError::invalid(path, format!("user {} out of range", r.user)))?;
        if slot.replace(r).is_some() {
            return Err(ArtifactError::invalid(path, format!("user {} listed twice", r.user)));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(u, s)| s.ok_or_else(|| ArtifactError::invalid(path, format!("user {u} missing"))))
        .collect()
}

fn interaction(r: &InteractionRecord) -> Interaction {
    Interaction {
        item: r.item,
        rating: r.rating,
        timestamp: r.ts,
    }
}

pub fn read_dataset(dir: &Path) -> Result<(SplitDataset, Vec<Option<ItemMeta>>), ArtifactError> {
    let ids_path = dir.join("ids.json");
    artifact::require(&ids_path, "prepare")?;
    let ids: IdsFile = artifact::read_json(&ids_path)?;
    let users = IdMap::from_ordered(ids.users);
    let items = IdMap::from_ordered(ids.items);

    let val_path = dir.join("val.jsonl");
    let test_path = dir.join("test.jsonl");
    let val = single_per_user(&val_path, artifact::read_jsonl(&val_path)?, users.len())?;
    let test = single_per_user(&test_path, artifact::read_jsonl(&test_path)?, users.len())?;

    let train_path = dir.join("train.jsonl");
    let mut train: Vec<Vec<InteractionRecord>> = vec![Vec::new(); users.len()];
    for r in artifact::read_jsonl::<InteractionRecord>(&train_path)? {
        train
            .get_mut(r.user)
            .ok_or_else(|| ArtifactError::invalid(&train_path, format!("user {} out of range", r.user)))?
            .push(r);
    }
    let mut split = Vec::with_capacity(users.len());
    for (user, mut rows) in train.into_iter().enumerate() {
        rows.sort_by_key(|r| r.pos);
        if rows.iter().chain([&val[user], &test[user]]).any(|r| r.item >= items.len()) {
            return Err(ArtifactError::invalid(dir, format!("user {user} references an unknown item")));
        }
        split.push(SplitUser {
            user,
            train: rows.iter().map(interaction).collect(),
            validation: interaction(&val[user]),
            test: interaction(&test[user]),
        });
    }

    let meta_path = dir.join("meta.jsonl");
    let mut meta = vec![None; items.len()];
    if meta_path.exists() {
        for r in artifact::read_jsonl::<MetaRecord>(&meta_path)? {
            if let Some(slot) = meta.get_mut(r.item) {
                *slot = Some(r.meta);
            }
        }
    }
    Ok((SplitDataset { users, items, split }, meta))
}
