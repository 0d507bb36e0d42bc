use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::http::{EndpointSpec, HttpError, JsonClient};

/// Source of text embeddings. Implementations must be callable from several
/// threads at once.
pub trait EmbeddingProvider: Sync {
    /// Stable identifier of the model and its settings; cache files are keyed by it.
    fn tag(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, HttpError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderKind {
    LocalDeterministic { seed: u64, dim: usize },
    RemoteHttp(EndpointSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderSpec {
    pub provider: ProviderKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Concurrent provider requests.
    #[serde(default = "default_fan_out")]
    pub fan_out: usize,
}

fn default_batch() -> usize {
    32
}

fn default_fan_out() -> usize {
    4
}

impl EmbeddingProviderSpec {
    pub fn local(seed: u64, dim: usize) -> Self {
        Self {
            provider: ProviderKind::LocalDeterministic { seed, dim },
            batch_size: default_batch(),
            fan_out: default_fan_out(),
        }
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>, HttpError> {
        Ok(match &self.provider {
            ProviderKind::LocalDeterministic { seed, dim } => Box::new(HashingEmbedder::new(*seed, *dim)),
            ProviderKind::RemoteHttp(endpoint) => Box::new(HttpEmbedder::new(endpoint)?),
        })
    }
}

/// Offline embedder: signed feature hashing of lowercase word tokens, seeded,
/// L2-normalised. Prompts that share words land close together.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    seed: u64,
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            let digest = hasher.finalize();
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn tag(&self) -> String {
        format!("local-hash-d{}-s{}", self.dim, self.seed)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, HttpError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// Remote embedder speaking the common `{"model", "input": [...]}` request.
/// Accepts `{"data": [{"embedding": [...]}]}`, `{"embeddings": [[...]]}` or a
/// bare array of vectors in response.
pub struct HttpEmbedder {
    client: JsonClient,
    model: String,
}

impl HttpEmbedder {
    pub fn new(spec: &EndpointSpec) -> Result<Self, HttpError> {
        Ok(Self {
            client: JsonClient::new(spec)?,
            model: spec.model.clone(),
        })
    }
}

fn vector(value: &Value) -> Option<Vec<f64>> {
    value.as_array()?.iter().map(Value::as_f64).collect()
}

pub(crate) fn parse_embedding_response(body: &Value, expected: usize) -> Result<Vec<Vec<f64>>, HttpError> {
    let rows: Vec<&Value> = if let Some(data) = body.get("data").and_then(Value::as_array) {
        let mut data: Vec<&Value> = data.iter().collect();
        data.sort_by_key(|d| d.get("index").and_then(Value::as_u64).unwrap_or(0));
        data.into_iter().filter_map(|d| d.get("embedding")).collect()
    } else if let Some(list) = body.get("embeddings").and_then(Value::as_array) {
        list.iter().map(|e| e.get("values").unwrap_or(e)).collect()
    } else if let Some(list) = body.as_array() {
        list.iter().collect()
    } else {
        return Err(HttpError::Body("no embeddings in response".into()));
    };
    let vectors: Vec<Vec<f64>> = rows
        .into_iter()
        .map(vector)
        .collect::<Option<_>>()
        .ok_or_else(|| HttpError::Body("embedding is not a list of numbers".into()))?;
    if vectors.len() != expected {
        return Err(HttpError::Body(format!("expected {expected} embeddings, got {}", vectors.len())));
    }
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.len() != first.len() || v.iter().any(|x| !x.is_finite())) {
            return Err(HttpError::Body("embeddings have unequal length or non-finite values".into()));
        }
    }
    Ok(vectors)
}

impl EmbeddingProvider for HttpEmbedder {
    fn tag(&self) -> String {
        self.model.replace(['/', ' ', ':'], "_")
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, HttpError> {
        let body = self.client.post(&json!({ "model": self.model, "input": texts }))?;
        parse_embedding_response(&body, texts.len())
    }
}
