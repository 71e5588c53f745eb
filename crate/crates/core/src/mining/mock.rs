//! Deterministic offline LLM.
//!
//! Responses are a pure function of `(provider id, seed, prompt bytes)`. The
//! mock recognizes each prompt template by its first line and answers in the
//! expected output schema. Interests are recovered from the `topic-<id>`
//! markers and topic keywords planted by the synthetic corpus generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::topic_keywords;
use crate::embed::{fnv1a, tokenize};
use crate::error::Result;

use super::client::LlmClient;
use super::prompts;
use super::rldi::heuristic_label;

/// Generic interests emitted for vaguely described items.
pub const GENERIC_INTERESTS: &[&str] = &["good quality products", "useful everyday items"];

/// Highest topic id the mock scans for when only keywords are present.
const MAX_SCANNED_TOPIC: usize = 64;

#[derive(Debug, Clone)]
pub struct MockLlm {
    id: String,
    seed: u64,
}

impl MockLlm {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        MockLlm { id: id.into(), seed }
    }

    fn rng(&self, prompt: &str) -> ChaCha8Rng {
        let mut bytes = self.id.clone().into_bytes();
        bytes.push(0);
        bytes.extend_from_slice(prompt.as_bytes());
        ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &bytes))
    }
}

fn first_line(t: &str) -> &str {
    t.lines().next().unwrap_or("")
}

/// Topic ids from `topic-<n>` markers, in order of first appearance.
fn marked_topics(text: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("topic-") {
        rest = &rest[pos + "topic-".len()..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(t) = digits.parse::<usize>() {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// Topics with at least two keywords present, most frequent first.
fn keyword_topics(text: &str) -> Vec<usize> {
    let tokens = tokenize(text);
    let mut scored: Vec<(usize, usize)> = (0..MAX_SCANNED_TOPIC)
        .filter_map(|t| {
            let kws = topic_keywords(t);
            let distinct = kws.iter().filter(|k| tokens.contains(k)).count();
            let total = tokens.iter().filter(|tok| kws.contains(tok)).count();
            (distinct >= 2).then_some((t, total))
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(t, _)| t).collect()
}

fn line_after<'a>(prompt: &'a str, prefix: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or("")
        .trim()
}

fn canonical_interest(topic: usize) -> String {
    let k = topic_keywords(topic);
    format!("{} {} enthusiast", k[0], k[1])
}

fn variant_interest(topic: usize, pick: usize) -> String {
    let k = topic_keywords(topic);
    match pick % 4 {
        0 => format!("{} {} lifestyle", k[2], k[3]),
        1 => format!("dedicated {} hobbyist", k[0]),
        2 => format!("{} gear upgrades", k[1]),
        _ => format!("{} focused routines", k[3]),
    }
}

fn level(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.random_bool(0.6) {
        "high"
    } else {
        "medium"
    }
}

impl MockLlm {
    fn item_interests(&self, prompt: &str, subject: &str, vague: bool) -> Vec<(String, &'static str)> {
        let mut rng = self.rng(prompt);
        let topics: Vec<usize> = marked_topics(subject).into_iter().take(3).collect();
        let mut out: Vec<(String, &'static str)> = Vec::new();
        if topics.is_empty() {
            let words: Vec<String> = tokenize(subject).into_iter().take(2).collect();
            out.push((format!("{} enthusiast", words.join(" ")), "medium"));
        } else if vague {
            out.push((canonical_interest(topics[0]), "low"));
        } else {
            for &t in &topics {
                out.push((canonical_interest(t), "high"));
                let pick = rng.random_range(0..4);
                let conf = level(&mut rng);
                out.push((variant_interest(t, pick), conf));
            }
        }
        if vague {
            for g in GENERIC_INTERESTS {
                out.push((g.to_string(), "medium"));
            }
        } else if rng.random_bool(0.2) {
            out.push((GENERIC_INTERESTS[0].to_string(), "low"));
        }
        out
    }

    fn lifestyle(topics: &[usize]) -> String {
        match topics.first() {
            Some(&t) => {
                let k = topic_keywords(t);
                format!("Someone who builds their routine around {} and {}.", k[0], k[1])
            }
            None => "Someone who shops for everyday essentials.".to_string(),
        }
    }

    fn answer_deep_interest(&self, prompt: &str) -> String {
        let history = line_after(prompt, "User History:");
        let vague = history.contains("basic everyday");
        let interests = self.item_interests(prompt, history, vague);
        let mut out = String::from("Step 1: surface patterns noted.\nStep 2: motivations inferred.\nStep 3: cross-domain interests predicted.\n\n");
        for (k, (text, conf)) in interests.iter().enumerate() {
            out.push_str(&format!("[Interest_{}]: {} | Confidence: {}\n", k + 1, text, conf));
        }
        out.push_str(&format!("[Lifestyle]: {}\n", Self::lifestyle(&marked_topics(history))));
        out
    }

    fn answer_multimodal(&self, prompt: &str) -> String {
        let title = line_after(prompt, "Title:");
        let image = line_after(prompt, "Image:");
        let vague = title.contains("basic everyday");
        let visual: Vec<String> = tokenize(image)
            .into_iter()
            .filter(|w| !matches!(w.as_str(), "with" | "a" | "the" | "and" | "visual" | "aesthetic" | "suited"))
            .take(3)
            .collect();
        let topics = marked_topics(title);
        let text_tags: Vec<String> = topics.iter().flat_map(|&t| topic_keywords(t).into_iter().take(2)).collect();
        let mut unified: Vec<String> = self
            .item_interests(prompt, title, vague)
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        if visual.len() >= 2 {
            unified.push(format!("{} {} aesthetic style", visual[0], visual[1]));
        }
        format!(
            "Visual Tags: [{}]\nText Tags: [{}]\nUnified Interests: [{}]\n",
            visual.join(", "),
            text_tags.join(", "),
            unified.join(", ")
        )
    }

    fn answer_user_profile(&self, prompt: &str) -> String {
        let mut topics = marked_topics(prompt);
        if topics.is_empty() {
            topics = keyword_topics(prompt);
        }
        let mut rng = self.rng(prompt);
        let mut out = String::new();
        let mut k = 0;
        for &t in topics.iter().take(2) {
            k += 1;
            out.push_str(&format!("[Interest_{k}]: {} | Confidence: high\n", canonical_interest(t)));
            k += 1;
            let pick = rng.random_range(0..4);
            out.push_str(&format!("[Interest_{k}]: {} | Confidence: medium\n", variant_interest(t, pick)));
        }
        if topics.is_empty() {
            out.push_str("[Interest_1]: everyday household shopping | Confidence: low\n");
        }
        out.push_str(&format!("[Lifestyle]: {}\n", Self::lifestyle(&topics)));
        out
    }
}

impl LlmClient for MockLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let head = first_line(prompt);
        let answer = if head == first_line(prompts::DEEP_INTEREST) {
            self.answer_deep_interest(prompt)
        } else if head == first_line(prompts::MULTIMODAL_INTEREST) {
            self.answer_multimodal(prompt)
        } else if head == first_line(prompts::VISUAL_DESCRIPTION) {
            let image = line_after(prompt, "Image:");
            format!("Visual Description: {image} with a polished, deliberate aesthetic\n")
        } else if head == first_line(prompts::USER_PROFILE) {
            self.answer_user_profile(prompt)
        } else if head == first_line(prompts::RLDI_CLASSIFICATION) {
            let interest = line_after(prompt, "Interest:").trim_matches('"');
            format!("Label: {}\n", heuristic_label(interest))
        } else if head == first_line(prompts::ENSEMBLE_AGGREGATION) {
            "Final Ensemble: []\n".to_string()
        } else {
            "I can only answer the pipeline's prompt templates.".to_string()
        };
        Ok(answer)
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_function_of_prompt_and_seed() {
        let a = MockLlm::new("m1", 3);
        let p = prompts::fill(prompts::DEEP_INTEREST, &[("history", "topic-2 espresso barista")]);
        assert_eq!(a.complete(&p).unwrap(), a.complete(&p).unwrap());
        assert_eq!(a.complete(&p).unwrap(), MockLlm::new("m1", 3).complete(&p).unwrap());
    }

    #[test]
    fn topic_markers() {
        assert_eq!(marked_topics("topic-3 topic-12 x topic-3"), vec![3, 12]);
        assert_eq!(keyword_topics("I love espresso and barista work; espresso"), vec![1]);
    }

    #[test]
    fn unknown_prompt_gets_unparseable_reply() {
        let m = MockLlm::new("m", 0);
        assert!(!m.complete("hello").unwrap().contains("[Interest_"));
    }
}
