//! Binary interest-quality labels: specific and actionable (1) versus vague
//! or generic (0).

use crate::corpus::ItemMeta;
use crate::embed::tokenize;
use crate::error::{Error, Result};

use super::client::LlmClient;
use super::parse::parse_label;
use super::prompts::render_rldi_prompt;
use super::{AggregatedInterests, Interest};

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "for", "to", "in", "on", "with", "at", "by", "from", "is", "are", "be",
    "this", "that", "it", "its", "as", "about", "into", "very", "some", "any", "all", "more", "most",
];

const GENERIC: &[&str] = &[
    "good", "great", "nice", "best", "quality", "high", "product", "products", "item", "items", "stuff", "thing",
    "things", "general", "various", "everyday", "useful", "value", "shopping", "shopper", "buy", "buying",
    "popular", "interest", "interests", "like", "likes", "people", "person", "user", "users", "basic", "essentials",
    "common", "regular", "normal", "cheap", "deals",
];

/// Offline stand-in for the classifier: at least three tokens, one of which
/// is neither a stopword nor a generic word.
pub fn heuristic_label(text: &str) -> u8 {
    let tokens = tokenize(text);
    let specific = tokens
        .iter()
        .any(|t| !STOPWORDS.contains(&t.as_str()) && !GENERIC.contains(&t.as_str()));
    u8::from(tokens.len() >= 3 && specific)
}

/// Where labels come from.
#[derive(Clone, Copy)]
pub enum RldiClassifier<'a> {
    Heuristic,
    Llm(&'a dyn LlmClient),
}

pub fn classify_rldi(classifier: RldiClassifier<'_>, interest: &Interest, source_items: &[ItemMeta]) -> Result<u8> {
    if interest.text.trim().is_empty() {
        return Err(Error::contract("cannot classify an empty interest"));
    }
    match classifier {
        RldiClassifier::Heuristic => Ok(heuristic_label(&interest.text)),
        RldiClassifier::Llm(client) => {
            let raw = client.complete(&render_rldi_prompt(&interest.text, source_items))?;
            parse_label(&raw)
        }
    }
}

/// Label every interest of `agg` in place.
pub fn label_interests(classifier: RldiClassifier<'_>, agg: &mut AggregatedInterests, source_items: &[ItemMeta]) -> Result<()> {
    for interest in &mut agg.interests {
        let label = classify_rldi(classifier, interest, source_items)?;
        interest.rldi = Some(label);
    }
    Ok(())
}
