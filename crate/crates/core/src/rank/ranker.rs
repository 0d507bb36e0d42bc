use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::prompt::{prompt_hash, ChatMessage};
use crate::corpus::ItemMeta;
use crate::http::{EndpointSpec, HttpError, JsonClient};

#[derive(Debug, Error)]
pub enum RankerError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("ranker returned no text: {0}")]
    NoText(String),
    #[error("{0}")]
    Other(String),
}

/// What the ranker is asked to do. Item lists are catalog indices in the
/// order they were shown, so identifier `[i]` is `items[i - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankTask {
    Window { items: Vec<usize> },
    Point { item: usize },
    Selection { items: Vec<usize>, k_out: usize },
}

#[derive(Debug, Clone)]
pub struct RankRequest {
    pub user: usize,
    pub history: Vec<usize>,
    pub task: RankTask,
    pub messages: Vec<ChatMessage>,
}

/// A chat model, or a stand-in for one. Replies are raw text and go through
/// the same parser whatever produced them.
pub trait Ranker: Sync {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RankerSpec {
    RemoteChat {
        endpoint: EndpointSpec,
        #[serde(default)]
        temperature: f64,
    },
    MockOracle,
    MockLexical,
    MockNoisy { p: f64, seed: u64 },
    MockIdentity,
}

impl RankerSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::MockNoisy { p, .. } if !(0.0..=1.0).contains(p) => Err(format!("noise p = {p} must lie in [0, 1]")),
            _ => Ok(()),
        }
    }

    /// `truth[u]` is the held-out item of user `u`; only the oracle-based
    /// mocks look at it.
    pub fn build(&self, truth: &[usize], metadata: &[Option<ItemMeta>]) -> Result<Box<dyn Ranker>, RankerError> {
        self.validate().map_err(RankerError::Other)?;
        Ok(match self {
            Self::RemoteChat { endpoint, temperature } => Box::new(ChatRanker::new(endpoint, *temperature)?),
            Self::MockOracle => Box::new(OracleRanker::new(truth.to_vec())),
            Self::MockLexical => Box::new(LexicalRanker::new(metadata)),
            Self::MockNoisy { p, seed } => Box::new(NoisyRanker::new(truth.to_vec(), *p, *seed)),
            Self::MockIdentity => Box::new(IdentityRanker),
        })
    }
}

fn format_rank(ids: &[usize]) -> String {
    let body: Vec<String> = ids.iter().map(|i| format!("[{i}]")).collect();
    json!({ "rank": body.join(" > ") }).to_string()
}

fn format_score(score: u8) -> String {
    json!({ "score": score }).to_string()
}

/// Identifiers sorted by descending `score`, ties kept in shown order.
fn ids_by_score(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..=scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b - 1].total_cmp(&scores[a - 1]));
    ids
}

/// Always keeps the shown order; point scores are all equal.
pub struct IdentityRanker;

impl Ranker for IdentityRanker {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        Ok(match &request.task {
            RankTask::Window { items } => format_rank(&(1..=items.len()).collect::<Vec<_>>()),
            RankTask::Selection { k_out, .. } => format_rank(&(1..=*k_out).collect::<Vec<_>>()),
            RankTask::Point { .. } => format_score(5),
        })
    }
}

/// Knows each user's held-out item and puts it first; everything else keeps
/// the shown order. Point scores are 10 for the held-out item, 0 otherwise.
pub struct OracleRanker {
    truth: Vec<usize>,
}

impl OracleRanker {
    pub fn new(truth: Vec<usize>) -> Self {
        Self { truth }
    }

    fn answer(&self, request: &RankRequest, flipped: bool) -> String {
        let truth = self.truth.get(request.user).copied();
        let preferred = |items: &[usize]| {
            let scores: Vec<f64> = items.iter().map(|&i| f64::from(u8::from(Some(i) == truth))).collect();
            let mut ids = ids_by_score(&scores);
            if flipped {
                ids.reverse();
            }
            ids
        };
        match &request.task {
            RankTask::Window { items } => format_rank(&preferred(items)),
            RankTask::Selection { items, k_out } => format_rank(&preferred(items)[..*k_out.min(&items.len())]),
            RankTask::Point { item } => format_score(if (Some(*item) == truth) != flipped { 10 } else { 0 }),
        }
    }
}

impl Ranker for OracleRanker {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        Ok(self.answer(request, false))
    }
}

/// The oracle, except that with probability `p` per call it answers with the
/// reverse of its preferred order. The draw is a hash of the seed and the
/// prompt, so replays are exact.
pub struct NoisyRanker {
    oracle: OracleRanker,
    p: f64,
    seed: u64,
}

impl NoisyRanker {
    pub fn new(truth: Vec<usize>, p: f64, seed: u64) -> Self {
        Self { oracle: OracleRanker::new(truth), p, seed }
    }

    fn draw(&self, request: &RankRequest) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt_hash(&request.messages).as_bytes());
        let digest = hasher.finalize();
        let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (bits >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Ranker for NoisyRanker {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let flipped = self.draw(request) < self.p;
        Ok(self.oracle.answer(request, flipped))
    }
}

/// Prefers candidates whose title, categories and brand share words with the
/// history (Jaccard overlap of lowercase word sets).
pub struct LexicalRanker {
    tokens: Vec<BTreeSet<String>>,
}

fn item_tokens(meta: Option<&ItemMeta>) -> BTreeSet<String> {
    let Some(meta) = meta else { return BTreeSet::new() };
    let mut text = String::new();
    for part in [&meta.title, &meta.brand].into_iter().flatten() {
        text.push_str(part);
        text.push(' ');
    }
    for path in &meta.categories {
        text.push_str(&path.join(" "));
        text.push(' ');
    }
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl LexicalRanker {
    pub fn new(metadata: &[Option<ItemMeta>]) -> Self {
        Self { tokens: metadata.iter().map(|m| item_tokens(m.as_ref())).collect() }
    }

    fn similarity(&self, item: usize, profile: &BTreeSet<String>) -> f64 {
        let Some(own) = self.tokens.get(item) else { return 0.0 };
        let union = own.union(profile).count();
        if union == 0 {
            0.0
        } else {
            own.intersection(profile).count() as f64 / union as f64
        }
    }
}

impl Ranker for LexicalRanker {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let profile: BTreeSet<String> = request
            .history
            .iter()
            .filter_map(|&h| self.tokens.get(h))
            .flatten()
            .cloned()
            .collect();
        let scores = |items: &[usize]| items.iter().map(|&i| self.similarity(i, &profile)).collect::<Vec<_>>();
        Ok(match &request.task {
            RankTask::Window { items } => format_rank(&ids_by_score(&scores(items))),
            RankTask::Selection { items, k_out } => {
                format_rank(&ids_by_score(&scores(items))[..*k_out.min(&items.len())])
            }
            RankTask::Point { item } => format_score((self.similarity(*item, &profile) * 10.0).round() as u8),
        })
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct ChatRanker {
    client: JsonClient,
    model: String,
    temperature: f64,
}

impl ChatRanker {
    pub fn new(endpoint: &EndpointSpec, temperature: f64) -> Result<Self, RankerError> {
        Ok(Self {
            client: JsonClient::new(endpoint)?,
            model: endpoint.model.clone(),
            temperature,
        })
    }
}

pub(crate) fn completion_text(body: &Value) -> Option<String> {
    let content = body
        .pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/message/content"))
        .or_else(|| body.get("content"))?;
    content.as_str().map(str::to_string)
}

impl Ranker for ChatRanker {
    fn respond(&self, request: &RankRequest) -> Result<String, RankerError> {
        let body = self.client.post(&json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": self.temperature,
        }))?;
        completion_text(&body).ok_or_else(|| RankerError::NoText(body.to_string()))
    }
}
