//! Re-ranking of retrieved candidates by a chat model.
//!
//! Every strategy returns a permutation of its input. When a reply cannot be
//! used the affected items keep their incoming order and the call is marked
//! as a fallback in the audit trail.

pub mod parse;
pub mod prompt;
pub mod ranker;

use log::warn;
use serde::{Deserialize, Serialize};

pub use parse::{parse_rank_response, parse_score_response, parse_selection_response, ParseFailure};
pub use prompt::{
    build_point_prompt, build_rank_prompt, build_selection_prompt, prompt_hash, ChatMessage, PromptContext,
    PromptInfoFlags, Role,
};
pub use ranker::{
    IdentityRanker, LexicalRanker, NoisyRanker, OracleRanker, RankRequest, RankTask, Ranker, RankerError, RankerSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RankStrategy {
    /// One prompt over all candidates; the model picks an ordered top `k_out`.
    Selection {
        #[serde(default = "default_k_out")]
        k_out: usize,
    },
    /// Each candidate scored on its own.
    PointWise,
    /// Window of `w` items slid from the bottom of the list to the top in
    /// steps of `d`. `w = 2, d = 1` compares adjacent pairs.
    Window {
        w: usize,
        d: usize,
        #[serde(default = "default_passes")]
        passes: usize,
    },
}

fn default_k_out() -> usize {
    10
}

fn default_passes() -> usize {
    1
}

impl RankStrategy {
    pub fn pairwise() -> Self {
        Self::Window { w: 2, d: 1, passes: 1 }
    }

    /// Checks the strategy against `k` retrieved candidates.
    pub fn validate(&self, k: usize) -> Result<(), String> {
        match *self {
            Self::Selection { k_out } if k_out == 0 || k_out > k => {
                Err(format!("selection size {k_out} must lie in 1..={k}"))
            }
            Self::Window { w, d, passes } => {
                if w < 2 {
                    Err(format!("window size {w} must be at least 2"))
                } else if w > k {
                    Err(format!("window size {w} exceeds the {k} retrieved candidates"))
                } else if d == 0 {
                    Err("stride must be at least 1".into())
                } else if passes == 0 {
                    Err("passes must be at least 1".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// One ranker call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub user: usize,
    /// 0-based call number within the user's run.
    pub call: usize,
    pub strategy: String,
    /// Half-open list positions covered by the call.
    pub span: [usize; 2],
    pub items: Vec<usize>,
    pub prompt_hash: String,
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub items: Vec<usize>,
    pub audit: Vec<AuditRecord>,
}

/// Per-user state shared by the strategies.
struct Session<'a> {
    user: usize,
    history: &'a [usize],
    ranker: &'a dyn Ranker,
    ctx: &'a PromptContext<'a>,
    audit: Vec<AuditRecord>,
}

impl Session<'_> {
    /// Sends one request and returns the raw reply or the error text,
    /// recording a provisional audit entry.
    fn send(&mut self, strategy: &str, span: [usize; 2], items: Vec<usize>, task: RankTask) -> Result<String, String> {
        let messages = match &task {
            RankTask::Window { items } => build_rank_prompt(self.user, self.history, items, self.ctx),
            RankTask::Point { item } => build_point_prompt(self.user, self.history, *item, self.ctx),
            RankTask::Selection { items, k_out } => {
                build_selection_prompt(self.user, self.history, items, *k_out, self.ctx)
            }
        };
        let hash = prompt_hash(&messages);
        let request = RankRequest { user: self.user, history: self.history.to_vec(), task, messages };
        let reply = self.ranker.respond(&request).map_err(|e| e.to_string());
        self.audit.push(AuditRecord {
            user: self.user,
            call: self.audit.len(),
            strategy: strategy.into(),
            span,
            items,
            prompt_hash: hash,
            response: reply.as_ref().ok().cloned(),
            error: reply.as_ref().err().cloned(),
            parsed: None,
            score: None,
            fallback: reply.is_err(),
        });
        reply
    }

    fn fail(&mut self, error: impl ToString) {
        let record = self.audit.last_mut().expect("a call was recorded");
        record.error.get_or_insert_with(|| error.to_string());
        record.fallback = true;
        warn!(
            "user {} call {}: {}; keeping incoming order",
            record.user,
            record.call,
            record.error.as_deref().unwrap_or_default()
        );
    }

    fn finish(self, items: Vec<usize>) -> RankedList {
        RankedList { items, audit: self.audit }
    }
}

/// Reorders `candidates` with the given strategy. `history` is the list of
/// history items shown in prompts, oldest first.
pub fn rank_user(
    user: usize,
    history: &[usize],
    candidates: &[usize],
    strategy: &RankStrategy,
    ranker: &dyn Ranker,
    ctx: &PromptContext,
) -> RankedList {
    match *strategy {
        RankStrategy::Selection { k_out } => selection_rank(user, history, candidates, k_out, ranker, ctx),
        RankStrategy::PointWise => point_wise_rank(user, history, candidates, ranker, ctx),
        RankStrategy::Window { w, d, passes } => {
            sliding_window_rank(user, history, candidates, w, d, passes, ranker, ctx)
        }
    }
}

/// Window starts of one pass over `k` items: bottom window first, moving up
/// by `d`, with the last window clamped to the top.
pub fn window_starts(k: usize, w: usize, d: usize) -> Vec<usize> {
    assert!(d > 0, "stride must be positive");
    if k < 2 {
        return Vec::new();
    }
    let w = w.min(k);
    let mut starts = Vec::new();
    let mut start = k - w;
    loop {
        starts.push(start);
        if start == 0 {
            return starts;
        }
        start = start.saturating_sub(d);
    }
}

/// Sliding-window reranking. A list shorter than `w` is treated as a single
/// window.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_rank(
    user: usize,
    history: &[usize],
    candidates: &[usize],
    w: usize,
    d: usize,
    passes: usize,
    ranker: &dyn Ranker,
    ctx: &PromptContext,
) -> RankedList {
    let mut session = Session { user, history, ranker, ctx, audit: Vec::new() };
    let mut list = candidates.to_vec();
    let width = w.min(list.len());
    for _ in 0..passes {
        for start in window_starts(list.len(), width, d) {
            let end = start + width;
            let window = list[start..end].to_vec();
            let task = RankTask::Window { items: window.clone() };
            let Ok(reply) = session.send("window", [start, end], window.clone(), task) else {
                session.fail("");
                continue;
            };
            match parse_rank_response(&reply, width) {
                Ok(order) => {
                    for (slot, id) in order.iter().enumerate() {
                        list[start + slot] = window[id - 1];
                    }
                    session.audit.last_mut().expect("recorded").parsed = Some(order);
                }
                Err(e) => session.fail(e),
            }
        }
    }
    session.finish(list)
}

/// Scores each candidate independently and sorts by score, ties in incoming
/// order. A failed call scores `-(incoming rank)`.
pub fn point_wise_rank(
    user: usize,
    history: &[usize],
    candidates: &[usize],
    ranker: &dyn Ranker,
    ctx: &PromptContext,
) -> RankedList {
    let mut session = Session { user, history, ranker, ctx, audit: Vec::new() };
    let mut scored: Vec<(i64, usize)> = Vec::with_capacity(candidates.len());
    for (pos, &item) in candidates.iter().enumerate() {
        let sentinel = -(pos as i64 + 1);
        let score = match session.send("point", [pos, pos + 1], vec![item], RankTask::Point { item }) {
            Ok(reply) => match parse_score_response(&reply) {
                Ok(s) => {
                    session.audit.last_mut().expect("recorded").score = Some(s);
                    i64::from(s)
                }
                Err(e) => {
                    session.fail(e);
                    sentinel
                }
            },
            Err(_) => {
                session.fail("");
                sentinel
            }
        };
        scored.push((score, item));
    }
    scored.sort_by_key(|s| std::cmp::Reverse(s.0));
    session.finish(scored.into_iter().map(|(_, item)| item).collect())
}

/// One prompt over all candidates; the chosen `k_out` go first in the
/// model's order and the rest follow in incoming order.
pub fn selection_rank(
    user: usize,
    history: &[usize],
    candidates: &[usize],
    k_out: usize,
    ranker: &dyn Ranker,
    ctx: &PromptContext,
) -> RankedList {
    let mut session = Session { user, history, ranker, ctx, audit: Vec::new() };
    if candidates.is_empty() {
        return session.finish(Vec::new());
    }
    let k_out = k_out.min(candidates.len());
    let task = RankTask::Selection { items: candidates.to_vec(), k_out };
    let reply = session.send("selection", [0, candidates.len()], candidates.to_vec(), task);
    let Ok(reply) = reply else {
        session.fail("");
        return session.finish(candidates.to_vec());
    };
    match parse_selection_response(&reply, candidates.len(), k_out) {
        Ok(ids) => {
            let mut chosen = vec![false; candidates.len()];
            let mut items: Vec<usize> = ids
                .iter()
                .map(|&id| {
                    chosen[id - 1] = true;
                    candidates[id - 1]
                })
                .collect();
            items.extend(candidates.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(&i, _)| i));
            session.audit.last_mut().expect("recorded").parsed = Some(ids);
            session.finish(items)
        }
        Err(e) => {
            session.fail(e);
            session.finish(candidates.to_vec())
        }
    }
}
