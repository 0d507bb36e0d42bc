//! Hit ratio and NDCG for a single held-out item per user.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// 1 when the held-out item sits at 1-based `rank` within the cutoff.
pub fn hit_rate_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` within the cutoff, else 0. With one relevant item the
/// ideal DCG is 1, so no further normalisation is needed.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Final ordered list for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub user: usize,
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub hr: f64,
    pub ndcg: f64,
}

/// Where the held-out item landed for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: usize,
    pub truth: usize,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub metrics: BTreeMap<usize, KMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
}

impl MetricReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.ndcg)
    }
}

/// Locates each user's held-out item (`truth[u]`) in the predictions. Every
/// user in `truth` is reported; users without a prediction count as misses.
pub fn locate(predictions: &[Prediction], truth: &[usize]) -> Vec<UserOutcome> {
    let mut by_user: Vec<Option<&Prediction>> = vec![None; truth.len()];
    for p in predictions {
        match by_user.get_mut(p.user) {
            Some(slot) => *slot = Some(p),
            None => warn!("prediction for unknown user {} ignored", p.user),
        }
    }
    let missing = by_user.iter().filter(|p| p.is_none()).count();
    if missing > 0 {
        warn!("{missing} users have no prediction list and count as misses");
    }
    truth
        .iter()
        .enumerate()
        .map(|(user, &t)| UserOutcome {
            user,
            truth: t,
            rank: by_user[user].and_then(|p| p.items.iter().position(|&i| i == t)).map(|pos| pos + 1),
        })
        .collect()
}

/// Averages HR@K and NDCG@K over all users in `truth`.
pub fn evaluate_run(predictions: &[Prediction], truth: &[usize], ks: &[usize]) -> MetricReport {
    summarize(&locate(predictions, truth), ks)
}

pub fn summarize(outcomes: &[UserOutcome], ks: &[usize]) -> MetricReport {
    let n = outcomes.len();
    let metrics = ks
        .iter()
        .map(|&k| {
            let (hr, ndcg) = outcomes.iter().fold((0.0, 0.0), |(h, g), o| {
                (h + hit_rate_at_k(o.rank, k), g + ndcg_at_k(o.rank, k))
            });
            let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            (k, KMetrics { hr: avg(hr), ndcg: avg(ndcg) })
        })
        .collect();
    MetricReport { users: n, metrics, fingerprint: None, config: None }
}
