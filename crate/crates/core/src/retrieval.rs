//! Candidate retrieval: every unseen item is scored against the user's most
//! recent history items by a recency-decayed, optionally rating-weighted mix of
//! semantic and collaborative similarity.

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbeddingMatrix};
use crate::matrix::Relation;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("user history is empty")]
    EmptyHistory,
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("item {0} is outside the catalog")]
    UnknownItem(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Weight of the semantic term; the collaborative term gets `1 - a`.
    pub a: f64,
    /// Recency decay base; the most recent item is weighted by `lambda^1`.
    pub lambda: f64,
    /// How many of the most recent items are scored against. `None` uses the
    /// whole sequence.
    pub history_len: Option<usize>,
    pub use_ratings: bool,
    pub k: usize,
    pub exclude_seen: bool,
    /// Seed for shuffling the returned candidates; `None` keeps score order.
    pub shuffle_seed: Option<u64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            lambda: 0.7,
            history_len: Some(3),
            use_ratings: false,
            k: 20,
            exclude_seen: true,
            shuffle_seed: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.a) {
            return bad(format!("a = {} must lie in [0, 1]", self.a));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda = {} must lie in (0, 1]", self.lambda));
        }
        if self.history_len == Some(0) {
            return bad("history length must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        Ok(())
    }
}

/// One item of the user's input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub item: usize,
    pub rating: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub item: usize,
    pub score: f64,
    /// 1-based position in the returned list.
    pub rank: usize,
}

/// The scored suffix of `history`, most recent first, with per-term weights
/// `r_j * lambda^t_j` and the normaliser `h`.
fn weighted_terms(history: &[HistoryItem], cfg: &RetrievalConfig) -> Result<(Vec<(usize, f64)>, f64), RetrievalError> {
    if history.is_empty() {
        return Err(RetrievalError::EmptyHistory);
    }
    let h = cfg.history_len.map_or(history.len(), |l| l.min(history.len()));
    let terms = history
        .iter()
        .rev()
        .take(h)
        .enumerate()
        .map(|(offset, entry)| {
            let rating = if cfg.use_ratings { f64::from(entry.rating) } else { 1.0 };
            let recency = cfg.lambda.powi(offset as i32 + 1);
            (entry.item, rating * recency)
        })
        .collect();
    Ok((terms, h as f64))
}

/// Score of a single candidate `x`, evaluated term by term.
pub fn score_item(
    x: usize,
    history: &[HistoryItem],
    cfg: &RetrievalConfig,
    semantic: &dyn Relation,
    collaborative: &dyn Relation,
) -> Result<f64, RetrievalError> {
    let (terms, h) = weighted_terms(history, cfg)?;
    let n = semantic.size();
    if x >= n {
        return Err(RetrievalError::UnknownItem(x));
    }
    let mut total = 0.0;
    for (item, weight) in terms {
        let mut mix = 0.0;
        if cfg.a > 0.0 {
            mix += cfg.a * semantic.value(x, item);
        }
        if cfg.a < 1.0 {
            mix += (1.0 - cfg.a) * collaborative.value(x, item);
        }
        total += weight * mix;
    }
    Ok(total / h)
}

/// Scores of every catalog item, accumulated column by column.
pub fn score_all(
    history: &[HistoryItem],
    cfg: &RetrievalConfig,
    semantic: &dyn Relation,
    collaborative: &dyn Relation,
) -> Result<Vec<f64>, RetrievalError> {
    let (terms, h) = weighted_terms(history, cfg)?;
    let n = semantic.size();
    if let Some(&(bad, _)) = terms.iter().find(|(item, _)| *item >= n) {
        return Err(RetrievalError::UnknownItem(bad));
    }
    let mut scores = vec![0.0; n];
    for (item, weight) in terms {
        if cfg.a > 0.0 {
            semantic.add_column(item, weight * cfg.a, &mut scores);
        }
        if cfg.a < 1.0 {
            collaborative.add_column(item, weight * (1.0 - cfg.a), &mut scores);
        }
    }
    scores.iter_mut().for_each(|s| *s /= h);
    Ok(scores)
}

fn top_k(scores: &[f64], history: &[HistoryItem], exclude_seen: bool, k: usize) -> Vec<ScoredCandidate> {
    let mut seen = vec![false; scores.len()];
    if exclude_seen {
        for entry in history {
            seen[entry.item] = true;
        }
    }
    let mut pool: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !seen[*i])
        .map(|(i, &s)| (i, s))
        .collect();
    if pool.is_empty() {
        warn!("no candidate items left after excluding the history");
    } else if k > pool.len() {
        warn!("k = {k} exceeds the {} available candidates; returning all", pool.len());
    }
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if pool.len() > k {
        pool.select_nth_unstable_by(k, order);
        pool.truncate(k);
    }
    pool.sort_unstable_by(order);
    pool.into_iter()
        .enumerate()
        .map(|(pos, (item, score))| ScoredCandidate { item, score, rank: pos + 1 })
        .collect()
}

/// Shuffles `candidates` with a generator seeded from `seed` and `user`, and
/// renumbers ranks to the new order.
pub fn shuffle_candidates(candidates: &mut [ScoredCandidate], seed: u64, user: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    candidates.shuffle(&mut rng);
    for (pos, c) in candidates.iter_mut().enumerate() {
        c.rank = pos + 1;
    }
}

/// The `k` best-scoring candidates for one user, highest score first, ties by
/// item index.
pub fn retrieve_top_k(
    user: usize,
    history: &[HistoryItem],
    cfg: &RetrievalConfig,
    semantic: &dyn Relation,
    collaborative: &dyn Relation,
) -> Result<Vec<ScoredCandidate>, RetrievalError> {
    cfg.validate()?;
    let scores = score_all(history, cfg, semantic, collaborative)?;
    let mut candidates = top_k(&scores, history, cfg.exclude_seen, cfg.k);
    if let Some(seed) = cfg.shuffle_seed {
        shuffle_candidates(&mut candidates, seed, user);
    }
    Ok(candidates)
}

/// Baseline: average the embeddings of the last `history_len` items into a
/// user vector and rank candidates by cosine to it.
pub fn average_pooling_baseline(
    history: &[HistoryItem],
    embeddings: &EmbeddingMatrix,
    history_len: Option<usize>,
    k: usize,
    exclude_seen: bool,
) -> Result<Vec<ScoredCandidate>, RetrievalError> {
    if history.is_empty() {
        return Err(RetrievalError::EmptyHistory);
    }
    let h = history_len.map_or(history.len(), |l| l.min(history.len()));
    let mut mean = vec![0.0; embeddings.dim()];
    for entry in history.iter().rev().take(h) {
        if entry.item >= embeddings.len() {
            return Err(RetrievalError::UnknownItem(entry.item));
        }
        for (m, v) in mean.iter_mut().zip(embeddings.row(entry.item)) {
            *m += v / h as f64;
        }
    }
    let scores: Vec<f64> = (0..embeddings.len())
        .map(|i| cosine(&mean, embeddings.row(i)).expect("equal dimensions"))
        .collect();
    Ok(top_k(&scores, history, exclude_seen, k))
}
