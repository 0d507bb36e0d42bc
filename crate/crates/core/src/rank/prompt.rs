//! Chat transcripts for the ranking strategies.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::sha256_hex;
use crate::collab::SparseInteractionMatrix;
use crate::corpus::ItemMeta;

pub const SYSTEM_PROMPT: &str = "You are an intelligent assistant that can rank items based on the user's preference.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// Which interaction counts are shown next to item metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptInfoFlags {
    pub include_popularity: bool,
    pub include_co_occurrence: bool,
}

impl Default for PromptInfoFlags {
    fn default() -> Self {
        Self { include_popularity: true, include_co_occurrence: true }
    }
}

/// Everything a prompt may draw on besides the items themselves.
#[derive(Clone, Copy)]
pub struct PromptContext<'a> {
    pub metadata: &'a [Option<ItemMeta>],
    pub counts: &'a SparseInteractionMatrix,
    pub flags: PromptInfoFlags,
}

/// Stable digest of a transcript, used to key audit records.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    sha256_hex(serde_json::to_string(messages).expect("messages serialize").as_bytes())
}

/// Renders a flat object with four-space indentation. Category paths stay on
/// one line each, which keeps long hierarchies readable.
fn render_object(fields: &[(String, Value)]) -> String {
    let mut out = String::from("{\n");
    for (pos, (key, value)) in fields.iter().enumerate() {
        let key = Value::String(key.clone()).to_string();
        let rendered = match value {
            Value::Array(paths) if paths.iter().all(Value::is_array) => {
                let lines: Vec<String> = paths.iter().map(|p| format!("        {}", inline(p))).collect();
                format!("[\n{}\n    ]", lines.join(",\n"))
            }
            other => inline(other),
        };
        out.push_str(&format!("    {key}: {rendered}"));
        out.push_str(if pos + 1 < fields.len() { ",\n" } else { "\n" });
    }
    out.push('}');
    out
}

/// Single-line JSON with a space after each comma, as in `["a", "b"]`.
fn inline(value: &Value) -> String {
    match value {
        Value::Array(items) => format!("[{}]", items.iter().map(inline).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn metadata_fields(meta: Option<&ItemMeta>) -> Vec<(String, Value)> {
    let mut fields = Vec::new();
    let Some(meta) = meta else { return fields };
    if let Some(title) = &meta.title {
        fields.push(("title".into(), Value::from(title.as_str())));
    }
    if let Some(ranks) = &meta.sales_rank {
        for (category, rank) in ranks {
            fields.push((format!("salesRank_{category}"), Value::from(*rank)));
        }
    }
    if !meta.categories.is_empty() {
        let paths = meta
            .categories
            .iter()
            .map(|p| Value::Array(p.iter().map(|c| Value::from(c.as_str())).collect()))
            .collect();
        fields.push(("categories".into(), Value::Array(paths)));
    }
    if let Some(price) = meta.price {
        fields.push(("price".into(), Value::from(price)));
    }
    if let Some(brand) = &meta.brand {
        fields.push(("brand".into(), Value::from(brand.as_str())));
    }
    fields
}

fn popularity_field(ctx: &PromptContext, item: usize) -> (String, Value) {
    let n = ctx.counts.popularity(item).unwrap_or(0);
    ("Number of users who interacted with this item".into(), Value::from(n))
}

fn history_block(ctx: &PromptContext, history: &[usize]) -> String {
    history
        .iter()
        .map(|&item| {
            let mut fields = vec![("Item ID".to_string(), Value::from(item))];
            fields.extend(metadata_fields(ctx.metadata.get(item).and_then(Option::as_ref)));
            if ctx.flags.include_popularity {
                fields.push(popularity_field(ctx, item));
            }
            render_object(&fields)
        })
        .collect::<Vec<_>>()
        .join(",\n")
}

fn candidate_object(ctx: &PromptContext, history: &[usize], item: usize) -> String {
    let mut fields = metadata_fields(ctx.metadata.get(item).and_then(Option::as_ref));
    if ctx.flags.include_popularity {
        fields.push(popularity_field(ctx, item));
    }
    if ctx.flags.include_co_occurrence {
        for &h in history {
            let n = ctx.counts.co_count(item, h).unwrap_or(0);
            fields.push((
                format!("Number of users who interacted with both this item and Item ID {h}"),
                Value::from(n),
            ));
        }
    }
    render_object(&fields)
}

/// System turn, history turn announcing `n` items, and one user/assistant
/// exchange per candidate.
fn preamble(user: usize, history: &[usize], candidates: &[usize], ctx: &PromptContext) -> Vec<ChatMessage> {
    let n = candidates.len();
    let mut messages = vec![
        ChatMessage::new(Role::System, SYSTEM_PROMPT),
        ChatMessage::new(
            Role::User,
            format!(
                "User {user} has purchased the following items in this order:\n{}\n\
                 I will provide you with {n} items, each indicated by number identifier []. \
                 Analyze the user's purchase history to identify preferences and purchase patterns. \
                 Then, rank the candidate items based on their alignment with the user's preferences \
                 and other contextual factors.",
                history_block(ctx, history)
            ),
        ),
        ChatMessage::new(Role::Assistant, "Okay, please provide the items."),
    ];
    for (pos, &item) in candidates.iter().enumerate() {
        let id = pos + 1;
        messages.push(ChatMessage::new(
            Role::User,
            format!("[{id}]\n{}", candidate_object(ctx, history, item)),
        ));
        messages.push(ChatMessage::new(Role::Assistant, format!("Received item [{id}].")));
    }
    messages
}

/// Transcript asking for a full ordering of `window`.
pub fn build_rank_prompt(user: usize, history: &[usize], window: &[usize], ctx: &PromptContext) -> Vec<ChatMessage> {
    let mut messages = preamble(user, history, window, ctx);
    messages.push(ChatMessage::new(
        Role::User,
        format!(
            "Analyze the user's purchase history to identify user preferences and purchase patterns.\n\
             Then, rank the {} items above based on their alignment with the user's preferences and other contextual factors.\n\
             All the items should be included and listed using identifiers, in descending order of the user's preference.\n\
             The most preferred recommendation item should be listed first.\n\
             The output format should be [] > [], where each [] is an identifier, e.g., [1] > [2].\n\
             Only respond with the ranking results, do not say any word or explain.\n\
             Output in the following JSON format:\n\
             {{\n    \"rank\": \"[] > [] .. > []\"\n}}",
            window.len()
        ),
    ));
    messages
}

/// Transcript asking the model to pick and order its `k_out` favourites.
pub fn build_selection_prompt(
    user: usize,
    history: &[usize],
    candidates: &[usize],
    k_out: usize,
    ctx: &PromptContext,
) -> Vec<ChatMessage> {
    let mut messages = preamble(user, history, candidates, ctx);
    messages.push(ChatMessage::new(
        Role::User,
        format!(
            "Analyze the user's purchase history to identify user preferences and purchase patterns.\n\
             Then, select the {k_out} items above that the user is most likely to purchase next.\n\
             List exactly {k_out} distinct identifiers, in descending order of the user's preference.\n\
             The output format should be [] > [], where each [] is an identifier, e.g., [1] > [2].\n\
             Only respond with the selection, do not say any word or explain.\n\
             Output in the following JSON format:\n\
             {{\n    \"rank\": \"[] > [] .. > []\"\n}}"
        ),
    ));
    messages
}

/// Transcript asking for a single 0-10 likelihood score for `item`.
pub fn build_point_prompt(user: usize, history: &[usize], item: usize, ctx: &PromptContext) -> Vec<ChatMessage> {
    let mut messages = preamble(user, history, &[item], ctx);
    messages.push(ChatMessage::new(
        Role::User,
        "Analyze the user's purchase history to identify user preferences and purchase patterns.\n\
         Then, rate how likely the user is to purchase item [1] next, as an integer from 0 (very unlikely) to 10 (very likely).\n\
         Only respond with the score, do not say any word or explain.\n\
         Output in the following JSON format:\n\
         {\n    \"score\": 0\n}",
    ));
    messages
}
