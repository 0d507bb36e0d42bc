//! Blocking JSON-over-HTTP client with retry and exponential backoff, shared by
//! the remote embedding provider and the remote chat ranker.

use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response body: {0}")]
    Body(String),
    #[error("environment variable {0} is not set")]
    MissingToken(String),
}

impl HttpError {
    /// Transport failures, rate limits and server errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Transport(_) => true,
            Self::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            Self::Body(_) | Self::MissingToken(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 20_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Runs `op` until it succeeds, fails permanently, or retries run out.
pub fn with_retry<T, F>(policy: &RetryPolicy, mut op: F) -> Result<T, HttpError>
where
    F: FnMut(u32) -> Result<T, HttpError>,
{
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Ok(value) => return Ok(value),
            Err(err) if err.is_transient() && attempt < policy.max_retries => {
                let delay = policy.delay(attempt);
                warn!("request failed (attempt {}): {err}; retrying in {delay:?}", attempt + 1);
                thread::sleep(delay);
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Endpoint settings shared by the remote providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout() -> u64 {
    60
}

pub struct JsonClient {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(spec: &EndpointSpec) -> Result<Self, HttpError> {
        let token = match &spec.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| HttpError::MissingToken(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: spec.url.clone(),
            token,
            retry: spec.retry,
        })
    }

    fn post_once(&self, body: &str) -> Result<Value, HttpError> {
        let mut request = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(HttpError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Body(e.to_string()))
    }

    pub fn post(&self, body: &Value) -> Result<Value, HttpError> {
        let body = body.to_string();
        with_retry(&self.retry, |_| self.post_once(&body))
    }
}
