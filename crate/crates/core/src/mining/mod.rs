//! Multi-LLM interest mining.
//!
//! Each provider is prompted with a chain-of-thought template per item; the
//! structured answers are parsed into [`InterestSet`]s, merged across
//! providers by embedding similarity into [`AggregatedInterests`], and
//! optionally summarized into a per-user [`UserProfile`].

pub mod client;
pub mod mock;
pub mod parse;
pub mod prompts;
pub mod rldi;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemMeta;
use crate::embed::{cosine, embed_text, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

pub use client::{HttpLlm, LlmClient, ProviderConfig};
pub use mock::MockLlm;
pub use rldi::{classify_rldi, heuristic_label, label_interests, RldiClassifier};

/// Default cosine threshold above which two interests are merged.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interest {
    pub text: String,
    pub confidence: f64,
    pub sources: BTreeSet<String>,
    #[serde(default)]
    pub rldi: Option<u8>,
}

impl Interest {
    pub fn new(text: impl Into<String>, confidence: f64, source: impl Into<String>) -> Self {
        Interest {
            text: text.into(),
            confidence,
            sources: BTreeSet::from([source.into()]),
            rldi: None,
        }
    }

    pub fn support(&self) -> usize {
        self.sources.len()
    }

    /// Mentioned by at least two providers.
    pub fn is_consensus(&self) -> bool {
        self.support() >= 2
    }
}

/// One provider's interests for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterestSet {
    pub item: String,
    pub provider: String,
    pub interests: Vec<Interest>,
    /// Set when a multi-modal request fell back to text-only mining.
    #[serde(default)]
    pub downgraded: bool,
}

impl InterestSet {
    /// Build from parsed `(text, confidence)` pairs, keeping the highest
    /// confidence for repeated texts.
    pub fn from_parsed(item: &str, provider: &str, parsed: Vec<(String, f64)>) -> Self {
        let mut interests: Vec<Interest> = Vec::new();
        for (text, conf) in parsed {
            match interests.iter_mut().find(|i| i.text == text) {
                Some(existing) => existing.confidence = existing.confidence.max(conf),
                None => interests.push(Interest::new(text, conf, provider)),
            }
        }
        InterestSet {
            item: item.to_string(),
            provider: provider.to_string(),
            interests,
            downgraded: false,
        }
    }
}

/// Interests for one item after merging every provider's output, ordered by
/// support, then confidence, then text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedInterests {
    pub item: String,
    pub interests: Vec<Interest>,
}

impl AggregatedInterests {
    /// Wrap interests, sorting them into canonical order.
    pub fn from_ranked(item: impl Into<String>, mut interests: Vec<Interest>) -> Self {
        interests.sort_by(rank_order);
        AggregatedInterests {
            item: item.into(),
            interests,
        }
    }

    /// Number of aggregated interests.
    pub fn count(&self) -> usize {
        self.interests.len()
    }
}

fn rank_order(a: &Interest, b: &Interest) -> Ordering {
    b.support()
        .cmp(&a.support())
        .then(b.confidence.total_cmp(&a.confidence))
        .then_with(|| a.text.cmp(&b.text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: String,
    pub interests: Vec<Interest>,
    pub lifestyle: String,
}

/// Text-only mining with the chain-of-thought template.
pub fn mine_item_interests(client: &dyn LlmClient, meta: &ItemMeta) -> Result<InterestSet> {
    if meta.title.trim().is_empty() {
        return Err(Error::contract(format!("item {} has an empty title", meta.item)));
    }
    let raw = client.complete(&prompts::render_text_prompt(meta, &[]))?;
    let parsed = parse::parse_interest_lines(&raw)?;
    Ok(InterestSet::from_parsed(&meta.item, client.id(), parsed))
}

/// Two requests: describe the image, then mine with text and description
/// combined. Items without a caption fall back to text-only mining.
pub fn mine_multimodal(client: &dyn LlmClient, meta: &ItemMeta) -> Result<InterestSet> {
    let Some(caption) = meta.image_caption.as_deref().filter(|c| !c.trim().is_empty()) else {
        log::info!("item {} has no image caption; mining text only", meta.item);
        let mut set = mine_item_interests(client, meta)?;
        set.downgraded = true;
        return Ok(set);
    };
    let description = parse::parse_visual_description(&client.complete(&prompts::render_visual_prompt(caption))?)?;
    let raw = client.complete(&prompts::render_multimodal_prompt(meta, &description))?;
    let out = parse::parse_multimodal(&raw)?;
    // the multi-modal schema carries no confidence; unified interests count as medium
    let medium = parse::confidence_score("medium").unwrap_or(0.6);
    let parsed = out.unified.into_iter().map(|t| (t, medium)).collect();
    Ok(InterestSet::from_parsed(&meta.item, client.id(), parsed))
}

/// Multi-modal mining when a caption exists, text-only otherwise.
pub fn mine_item(client: &dyn LlmClient, meta: &ItemMeta) -> Result<InterestSet> {
    if meta.image_caption.is_some() {
        mine_multimodal(client, meta)
    } else {
        mine_item_interests(client, meta)
    }
}

/// Merge interests from several providers for one item.
///
/// All interests are sorted globally (confidence desc, text, provider) and
/// clustered greedily: each joins the first existing cluster whose
/// representative is within `merge_threshold` cosine, else opens a new one.
/// A cluster keeps its representative's text, the union of sources and the
/// maximum confidence.
pub fn aggregate_ensemble(sets: &[InterestSet], embedder: &dyn Embedder, merge_threshold: f64) -> Result<AggregatedInterests> {
    let first = sets
        .first()
        .ok_or_else(|| Error::contract("aggregation needs at least one interest set"))?;
    if let Some(other) = sets.iter().find(|s| s.item != first.item) {
        return Err(Error::contract(format!(
            "cannot aggregate interests of items {} and {}",
            first.item, other.item
        )));
    }
    let mut all: Vec<(&Interest, &str)> = sets
        .iter()
        .flat_map(|s| s.interests.iter().map(move |i| (i, s.provider.as_str())))
        .collect();
    all.sort_by(|(a, pa), (b, pb)| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| pa.cmp(pb))
    });

    let mut clusters: Vec<(Interest, EmbeddingVector)> = Vec::new();
    for (interest, provider) in all {
        let v = embed_text(embedder, &interest.text)?;
        let mut home = None;
        for (idx, (_, rep)) in clusters.iter().enumerate() {
            if cosine(&v, rep)? >= merge_threshold {
                home = Some(idx);
                break;
            }
        }
        match home {
            Some(idx) => {
                let merged = &mut clusters[idx].0;
                merged.sources.insert(provider.to_string());
                merged.sources.extend(interest.sources.iter().cloned());
                merged.confidence = merged.confidence.max(interest.confidence);
            }
            None => {
                let mut rep = interest.clone();
                rep.sources.insert(provider.to_string());
                rep.rldi = None;
                clusters.push((rep, v));
            }
        }
    }
    Ok(AggregatedInterests::from_ranked(
        first.item.clone(),
        clusters.into_iter().map(|(i, _)| i).collect(),
    ))
}

/// Synthesize a user-level profile from the user's item-level interests.
pub fn mine_user_profile(client: &dyn LlmClient, user: &str, item_interests: &[AggregatedInterests]) -> Result<UserProfile> {
    if item_interests.is_empty() {
        return Err(Error::contract(format!("user {user} has no item interests")));
    }
    let listing: Vec<(String, Vec<String>)> = item_interests
        .iter()
        .map(|a| (a.item.clone(), a.interests.iter().map(|i| i.text.clone()).collect()))
        .collect();
    let raw = client.complete(&prompts::render_user_prompt(&listing))?;
    let parsed = parse::parse_interest_lines(&raw)?;
    let lifestyle = parse::parse_lifestyle(&raw)?;
    let set = InterestSet::from_parsed(user, client.id(), parsed);
    Ok(UserProfile {
        user: user.to_string(),
        interests: set.interests,
        lifestyle,
    })
}

/// Mine every item with one provider, at most `client.max_in_flight()`
/// requests at a time. Output order follows `metas`.
pub fn mine_items_concurrent(client: &dyn LlmClient, metas: &[ItemMeta]) -> Result<Vec<InterestSet>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(client.max_in_flight().max(1))
        .build()
        .map_err(|e| Error::Provider {
            provider: client.id().to_string(),
            message: e.to_string(),
        })?;
    pool.install(|| metas.par_iter().map(|m| mine_item(client, m)).collect())
}

/// Mine with every provider, aggregate per item, and label every interest.
/// Items are returned sorted by id.
pub fn mine_corpus(
    clients: &[&dyn LlmClient],
    metas: &[ItemMeta],
    embedder: &dyn Embedder,
    merge_threshold: f64,
    classifier: RldiClassifier<'_>,
) -> Result<Vec<AggregatedInterests>> {
    let mut per_item: BTreeMap<String, Vec<InterestSet>> = BTreeMap::new();
    for client in clients {
        for set in mine_items_concurrent(*client, metas)? {
            per_item.entry(set.item.clone()).or_default().push(set);
        }
    }
    let by_id: BTreeMap<&str, &ItemMeta> = metas.iter().map(|m| (m.item.as_str(), m)).collect();
    per_item
        .into_values()
        .map(|sets| {
            let mut agg = aggregate_ensemble(&sets, embedder, merge_threshold)?;
            let source = by_id.get(agg.item.as_str()).map(|m| vec![(*m).clone()]).unwrap_or_default();
            label_interests(classifier, &mut agg, &source)?;
            Ok(agg)
        })
        .collect()
}
