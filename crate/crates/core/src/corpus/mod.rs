//! Review and metadata ingestion, k-core filtering and leave-one-out splits.
//!
//! The input is the 2014 Amazon review dump: one record per line, either strict
//! JSON or the Python-literal dialect used by the metadata files. Malformed
//! lines are counted and skipped; only I/O failures are fatal.

mod pyliteral;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read input: {0}")]
    Io(#[from] std::io::Error),
    #[error("k-core threshold must be at least 1")]
    InvalidK,
    #[error("k-core filtering with k={k} removed every interaction")]
    EmptyDataset { k: usize },
    #[error("no user has the 3 interactions a leave-one-out split needs")]
    NoSplittableUsers,
}

/// One review event as it appears in the raw dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReview {
    pub user_id: String,
    pub item_id: String,
    pub rating: u8,
    pub timestamp: i64,
    /// 1-based line number in the source stream.
    pub source_line: usize,
}

/// Item metadata. Category paths are kept as ordered lists, outermost first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sales_rank: Option<BTreeMap<String, i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
}

impl ItemMeta {
    /// An item with neither title nor description. Still usable, but its
    /// semantic signal comes from the remaining fields only.
    pub fn is_metadata_poor(&self) -> bool {
        self.title.is_none() && self.description.is_none()
    }
}

/// Records parsed from a stream plus the number of lines that were rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub skipped: usize,
}

fn parse_lines<R, T, F>(mut reader: R, what: &str, mut parse: F) -> Result<Parsed<T>, CorpusError>
where
    R: BufRead,
    F: FnMut(&Value, usize) -> Option<T>,
{
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let Ok(line) = std::str::from_utf8(&buf) else {
            warn!("{what} line {line_no}: not valid UTF-8, skipped");
            skipped += 1;
            continue;
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value = serde_json::from_str::<Value>(line)
            .ok()
            .or_else(|| pyliteral::parse(line).ok());
        match value.as_ref().and_then(|v| parse(v, line_no)) {
            Some(record) => records.push(record),
            None => {
                warn!("{what} line {line_no}: malformed record, skipped");
                skipped += 1;
            }
        }
    }
    Ok(Parsed { records, skipped })
}

fn non_empty_str(value: Option<&Value>) -> Option<String> {
    match value? {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        _ => None,
    }
}

fn review_from_value(value: &Value, source_line: usize) -> Option<RawReview> {
    let user_id = non_empty_str(value.get("reviewerID"))?;
    let item_id = non_empty_str(value.get("asin"))?;
    let overall = value.get("overall")?.as_f64()?;
    if overall.fract() != 0.0 || !(1.0..=5.0).contains(&overall) {
        return None;
    }
    let timestamp = value.get("unixReviewTime")?.as_i64()?;
    Some(RawReview {
        user_id,
        item_id,
        rating: overall as u8,
        timestamp,
        source_line,
    })
}

/// Parses newline-delimited review records (`reviewerID`, `asin`, `overall`,
/// `unixReviewTime`).
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<Parsed<RawReview>, CorpusError> {
    parse_lines(reader, "review", review_from_value)
}

fn meta_from_value(value: &Value, _line: usize) -> Option<ItemMeta> {
    let item_id = non_empty_str(value.get("asin"))?;
    let categories = match value.get("categories") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(paths)) => paths
            .iter()
            .map(|path| match path {
                Value::Array(parts) => parts
                    .iter()
                    .map(|p| p.as_str().map(str::to_owned))
                    .collect::<Option<Vec<_>>>(),
                Value::String(s) => Some(vec![s.clone()]),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect(),
        Some(_) => return None,
    };
    let sales_rank = match value.get("salesRank") {
        None | Some(Value::Null) => None,
        Some(Value::Object(map)) => {
            let ranks = map
                .iter()
                .map(|(k, v)| v.as_i64().map(|r| (k.clone(), r)))
                .collect::<Option<BTreeMap<_, _>>>()?;
            (!ranks.is_empty()).then_some(ranks)
        }
        Some(_) => return None,
    };
    let price = match value.get("price") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().filter(|p| p.is_finite())?),
    };
    Some(ItemMeta {
        item_id,
        title: non_empty_str(value.get("title")),
        description: non_empty_str(value.get("description")),
        categories,
        sales_rank,
        price,
        brand: non_empty_str(value.get("brand")),
    })
}

/// Parses newline-delimited metadata records. Accepts strict JSON as well as the
/// Python-literal encoding of the original dump.
pub fn parse_metadata<R: BufRead>(reader: R) -> Result<Parsed<ItemMeta>, CorpusError> {
    let parsed = parse_lines(reader, "metadata", meta_from_value)?;
    let poor = parsed.records.iter().filter(|m| m.is_metadata_poor()).count();
    if poor > 0 {
        warn!("{poor} items have neither title nor description");
    }
    Ok(parsed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KcoreMode {
    /// Repeat the user and item filters until nothing changes.
    #[default]
    Fixpoint,
    /// Drop sparse users once, then sparse items once.
    SinglePass,
}

impl std::str::FromStr for KcoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixpoint" => Ok(Self::Fixpoint),
            "single-pass" => Ok(Self::SinglePass),
            other => Err(format!("unknown k-core mode `{other}` (fixpoint|single-pass)")),
        }
    }
}

fn interaction_counts<'a>(
    reviews: &'a [RawReview],
    alive: &[bool],
) -> (HashMap<&'a str, usize>, HashMap<&'a str, usize>) {
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    for (r, _) in reviews.iter().zip(alive).filter(|(_, &a)| a) {
        *users.entry(r.user_id.as_str()).or_insert(0) += 1;
        *items.entry(r.item_id.as_str()).or_insert(0) += 1;
    }
    (users, items)
}

/// Removes users and items with fewer than `k` interactions. Surviving records
/// keep their input order.
pub fn kcore_filter(
    reviews: &[RawReview],
    k: usize,
    mode: KcoreMode,
) -> Result<Vec<RawReview>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidK);
    }
    let mut alive = vec![true; reviews.len()];
    match mode {
        KcoreMode::Fixpoint => loop {
            let (users, items) = interaction_counts(reviews, &alive);
            let mut changed = false;
            for (r, a) in reviews.iter().zip(alive.iter_mut()).filter(|(_, a)| **a) {
                if users[r.user_id.as_str()] < k || items[r.item_id.as_str()] < k {
                    *a = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        },
        KcoreMode::SinglePass => {
            let (users, _) = interaction_counts(reviews, &alive);
            for (r, a) in reviews.iter().zip(alive.iter_mut()) {
                *a = users[r.user_id.as_str()] >= k;
            }
            let (_, items) = interaction_counts(reviews, &alive);
            for (r, a) in reviews.iter().zip(alive.iter_mut()).filter(|(_, a)| **a) {
                *a = items[r.item_id.as_str()] >= k;
            }
        }
    }
    let kept: Vec<RawReview> = reviews
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r.clone())
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyDataset { k });
    }
    Ok(kept)
}

/// Bijection between opaque string ids and dense indices. Indices follow the
/// lexicographic order of the ids, so they do not depend on record order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort_unstable();
        ids.dedup();
        Self::from_ordered(ids)
    }

    /// Keeps the given order; duplicates are dropped after their first occurrence.
    pub fn from_ordered(ids: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(ids.len());
        let mut unique = Vec::with_capacity(ids.len());
        for id in ids {
            if !index.contains_key(&id) {
                index.insert(id.clone(), unique.len());
                unique.push(id);
            }
        }
        Self { ids: unique, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub rating: u8,
    pub timestamp: i64,
}

/// Chronological interaction history of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<Interaction>,
}

#[derive(Debug, Clone)]
pub struct Sequences {
    pub users: IdMap,
    pub items: IdMap,
    pub sequences: Vec<UserSequence>,
}

/// Groups reviews per user and orders each history by timestamp, breaking
/// ties by source line.
pub fn build_sequences(reviews: &[RawReview]) -> Sequences {
    let users = IdMap::from_ids(reviews.iter().map(|r| r.user_id.as_str()));
    let items = IdMap::from_ids(reviews.iter().map(|r| r.item_id.as_str()));
    let mut grouped: Vec<Vec<&RawReview>> = vec![Vec::new(); users.len()];
    for r in reviews {
        grouped[users.index_of(&r.user_id).expect("user indexed")].push(r);
    }
    let sequences = grouped
        .into_iter()
        .enumerate()
        .map(|(user, mut events)| {
            events.sort_by_key(|r| (r.timestamp, r.source_line));
            UserSequence {
                user,
                items: events
                    .into_iter()
                    .map(|r| Interaction {
                        item: items.index_of(&r.item_id).expect("item indexed"),
                        rating: r.rating,
                        timestamp: r.timestamp,
                    })
                    .collect(),
            }
        })
        .collect();
    Sequences {
        users,
        items,
        sequences,
    }
}

/// One user's leave-one-out partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitUser {
    pub user: usize,
    pub train: Vec<Interaction>,
    pub validation: Interaction,
    pub test: Interaction,
}

impl SplitUser {
    /// Everything the model may see when predicting the test item.
    pub fn input_sequence(&self) -> Vec<Interaction> {
        let mut seq = self.train.clone();
        seq.push(self.validation);
        seq
    }

    pub fn full_sequence(&self) -> Vec<Interaction> {
        let mut seq = self.input_sequence();
        seq.push(self.test);
        seq
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub users: IdMap,
    pub items: IdMap,
    /// Indexed by user: `split[u].user == u`.
    pub split: Vec<SplitUser>,
}

impl SplitDataset {
    pub fn user(&self, user: usize) -> Option<&SplitUser> {
        self.split.get(user)
    }

    pub fn interactions(&self) -> usize {
        self.split.iter().map(|u| u.train.len() + 2).sum()
    }
}

/// Holds out the last item for test and the second to last for validation.
/// Users with fewer than three interactions are dropped and the surviving users
/// are re-indexed in their original order.
pub fn leave_one_out_split(sequences: Sequences) -> Result<SplitDataset, CorpusError> {
    let Sequences {
        users,
        items,
        sequences,
    } = sequences;
    let mut kept_ids = Vec::new();
    let mut split = Vec::new();
    for seq in sequences {
        let n = seq.items.len();
        let user_id = users.id(seq.user).unwrap_or_default().to_owned();
        if n < 3 {
            warn!("user {user_id} has {n} interactions; at least 3 are needed, dropped");
            continue;
        }
        let mut train = seq.items;
        let test = train.pop().expect("len >= 3");
        let validation = train.pop().expect("len >= 2");
        split.push(SplitUser {
            user: kept_ids.len(),
            train,
            validation,
            test,
        });
        kept_ids.push(user_id);
    }
    if split.is_empty() {
        return Err(CorpusError::NoSplittableUsers);
    }
    Ok(SplitDataset {
        users: IdMap::from_ordered(kept_ids),
        items,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Interactions over users × items, as a percentage.
    pub density_percent: f64,
}

pub fn dataset_stats(data: &SplitDataset) -> DatasetStats {
    let users = data.split.len();
    let items = data.items.len();
    let interactions = data.interactions();
    DatasetStats {
        users,
        items,
        interactions,
        density_percent: density_percent(users, items, interactions),
    }
}

pub fn density_percent(users: usize, items: usize, interactions: usize) -> f64 {
    let cells = users as f64 * items as f64;
    if cells > 0.0 {
        100.0 * interactions as f64 / cells
    } else {
        0.0
    }
}

/// Aligns parsed metadata to the catalog index. Items without a metadata
/// record map to `None`.
pub fn align_metadata(items: &IdMap, metas: Vec<ItemMeta>) -> Vec<Option<ItemMeta>> {
    let mut aligned = vec![None; items.len()];
    for meta in metas {
        if let Some(idx) = items.index_of(&meta.item_id) {
            aligned[idx].get_or_insert(meta);
        }
    }
    let missing = aligned.iter().filter(|m| m.is_none()).count();
    if missing > 0 {
        warn!("{missing} catalog items have no metadata record");
    }
    aligned
}
