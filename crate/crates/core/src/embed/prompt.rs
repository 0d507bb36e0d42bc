use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EmbedError;
use crate::corpus::ItemMeta;

pub const DEFAULT_PROMPT_BUDGET: usize = 8000;

/// Text sent to the embedding model for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPrompt {
    pub item: usize,
    pub text: String,
}

/// Renders the item's metadata as `field: value` lines in the fixed order
/// description, title, salesRank, categories, price, brand. Identifiers and
/// URLs are never included. The text is cut to `max_chars` characters.
pub fn build_item_prompt(item: usize, meta: &ItemMeta, max_chars: usize) -> Result<ItemPrompt, EmbedError> {
    let mut lines: Vec<String> = Vec::new();
    if let Some(description) = &meta.description {
        lines.push(format!("description: {}", description.trim_end()));
    }
    if let Some(title) = &meta.title {
        lines.push(format!("title: {}", title.trim_end()));
    }
    if let Some(ranks) = &meta.sales_rank {
        let mut text = String::from("salesRank: {");
        for (n, (category, rank)) in ranks.iter().enumerate() {
            if n > 0 {
                text.push_str(", ");
            }
            let _ = write!(text, "'{category}': {rank}");
        }
        text.push('}');
        lines.push(text);
    }
    if !meta.categories.is_empty() {
        let paths: Vec<String> = meta.categories.iter().map(|p| p.join(" > ")).collect();
        lines.push(format!("categories: {}", paths.join("; ")));
    }
    if let Some(price) = meta.price {
        lines.push(format!("price: {price}"));
    }
    if let Some(brand) = &meta.brand {
        lines.push(format!("brand: {brand}"));
    }
    if lines.is_empty() {
        return Err(EmbedError::EmptyMetadata { item });
    }
    let mut text = lines.join("\n");
    if let Some((cut, _)) = text.char_indices().nth(max_chars) {
        text.truncate(cut);
    }
    Ok(ItemPrompt { item, text })
}
