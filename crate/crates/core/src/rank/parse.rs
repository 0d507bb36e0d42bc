//! Tolerant parsing of ranking replies.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseFailure {
    #[error("no ranking found in response")]
    Empty,
    #[error("unrecognised token `{0}`")]
    Malformed(String),
    #[error("identifier [{id}] outside 1..={max}")]
    OutOfRange { id: usize, max: usize },
    #[error("identifier [{0}] listed twice")]
    Duplicate(usize),
    #[error("expected {expected} identifiers, found {found}")]
    Cardinality { expected: usize, found: usize },
    #[error("no score found in response")]
    NoScore,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let body = rest.split_once('\n').map_or("", |(_, body)| body);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// First JSON object embedded in `text`, if any.
fn embedded_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| serde_json::from_str(&text[start..=end]).ok()).flatten()
}

/// Pulls the ranking string out of a reply: the `rank` field of a JSON
/// object when there is one, the bare text otherwise.
fn rank_text(text: &str) -> String {
    let body = strip_fences(text);
    match embedded_object(body) {
        Some(Value::Object(map)) => match map.get("rank") {
            Some(Value::String(s)) => s.clone(),
            _ => String::new(),
        },
        _ => body.to_string(),
    }
}

/// Reads `[a] > [b] > ...` into 1-based identifiers, each within `1..=max`
/// and distinct.
pub fn parse_identifiers(text: &str, max: usize) -> Result<Vec<usize>, ParseFailure> {
    let compact: String = rank_text(text).chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(ParseFailure::Empty);
    }
    let mut seen = vec![false; max + 1];
    let mut ids = Vec::new();
    for token in compact.split('>') {
        let id = token
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| ParseFailure::Malformed(token.to_string()))?;
        if id == 0 || id > max {
            return Err(ParseFailure::OutOfRange { id, max });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(ParseFailure::Duplicate(id));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// A full ordering of a window of `w` items, as 1-based identifiers.
pub fn parse_rank_response(text: &str, w: usize) -> Result<Vec<usize>, ParseFailure> {
    let ids = parse_identifiers(text, w)?;
    if ids.len() != w {
        return Err(ParseFailure::Cardinality { expected: w, found: ids.len() });
    }
    Ok(ids)
}

/// An ordered choice of exactly `k_out` of `n` items.
pub fn parse_selection_response(text: &str, n: usize, k_out: usize) -> Result<Vec<usize>, ParseFailure> {
    let ids = parse_identifiers(text, n)?;
    if ids.len() != k_out {
        return Err(ParseFailure::Cardinality { expected: k_out, found: ids.len() });
    }
    Ok(ids)
}

/// A 0-10 score from `{"score": N}` or a bare integer.
pub fn parse_score_response(text: &str) -> Result<u8, ParseFailure> {
    let body = strip_fences(text);
    let value = match embedded_object(body) {
        Some(obj) => obj.get("score").cloned().ok_or(ParseFailure::NoScore)?,
        None => serde_json::from_str(body).map_err(|_| ParseFailure::NoScore)?,
    };
    let score = match &value {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    };
    match score {
        Some(s) if s <= 10 => Ok(s as u8),
        _ => Err(ParseFailure::NoScore),
    }
}
