//! Ranking metrics, interest quality, and evaluation runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::embed::{cosine, embed_text, Embedder, EmbeddingVector, INTEREST_SEPARATOR};
use crate::error::{Error, Result};
use crate::genmodel::{beam_search, encode_history, GenModel};
use crate::mining::{AggregatedInterests, Interest};
use crate::tokenizer::{assign_sids, Codebooks, SidTable, SidTrie};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCfg {
    pub beam: usize,
    pub ks: Vec<usize>,
    pub n_hist: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            beam: 20,
            ks: vec![5, 10],
            n_hist: 20,
        }
    }
}

impl EvalCfg {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.beam == 0 {
            problems.push("eval beam must be >= 1".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            problems.push("eval ks must be a non-empty list of positive cutoffs".into());
        }
        if self.n_hist == 0 {
            problems.push("eval n_hist must be >= 1".into());
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    pub dataset: String,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub iq: Option<f64>,
    pub n_users: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }
}

/// Plain-text table with one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let ks: BTreeSet<usize> = reports.iter().flat_map(|r| r.hr.keys().copied()).collect();
    let mut out = format!("{:<20} {:<12} {:>6}", "arm", "dataset", "users");
    for k in &ks {
        let _ = write!(out, " {:>9} {:>9}", format!("HR@{k}"), format!("NDCG@{k}"));
    }
    out.push_str(&format!(" {:>7}\n", "IQ"));
    for r in reports {
        let _ = write!(out, "{:<20} {:<12} {:>6}", r.arm, r.dataset, r.n_users);
        for k in &ks {
            let _ = write!(out, " {:>9.4} {:>9.4}", r.hr_at(*k), r.ndcg_at(*k));
        }
        match r.iq {
            Some(iq) => out.push_str(&format!(" {iq:>7.4}\n")),
            None => out.push_str(&format!(" {:>7}\n", "-")),
        }
    }
    out
}

fn check_lengths(rankings: &[Vec<String>], targets: &[String]) -> Result<()> {
    if rankings.len() != targets.len() || targets.is_empty() {
        return Err(Error::contract(format!(
            "need one ranking per target ({} rankings, {} targets)",
            rankings.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// 1-based position of `target` in `ranking`.
pub fn rank_of(ranking: &[String], target: &str) -> Option<usize> {
    ranking.iter().position(|i| i == target).map(|p| p + 1)
}

pub fn hit_rate(rankings: &[Vec<String>], targets: &[String], k: usize) -> Result<f64> {
    check_lengths(rankings, targets)?;
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, t)| rank_of(r, t).is_some_and(|p| p <= k))
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Single-relevant-item NDCG: the ideal DCG is 1.
pub fn ndcg(rankings: &[Vec<String>], targets: &[String], k: usize) -> Result<f64> {
    check_lengths(rankings, targets)?;
    let total: f64 = rankings
        .iter()
        .zip(targets)
        .filter_map(|(r, t)| rank_of(r, t).filter(|&p| p <= k))
        .map(|p| 1.0 / ((p + 1) as f64).log2())
        .sum();
    Ok(total / targets.len() as f64)
}

/// Item-level interests of `history`, concatenated in history order with
/// repeated texts dropped.
pub fn user_interests(history: &[String], interests: &BTreeMap<String, AggregatedInterests>) -> Vec<Interest> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in history {
        if let Some(agg) = interests.get(item) {
            for i in &agg.interests {
                if seen.insert(i.text.clone()) {
                    out.push(i.clone());
                }
            }
        }
    }
    out
}

/// Mean cosine between each user's interest embedding and the embeddings of
/// the items they interact with afterwards.
pub fn interest_quality(
    user_interests: &BTreeMap<String, Vec<Interest>>,
    future_items: &BTreeMap<String, Vec<String>>,
    item_embeddings: &BTreeMap<String, EmbeddingVector>,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (user, future) in future_items {
        let interests = user_interests
            .get(user)
            .filter(|i| !i.is_empty())
            .ok_or_else(|| Error::contract(format!("user {user} has no interests")))?;
        let text = interests.iter().map(|i| i.text.as_str()).collect::<Vec<_>>().join(INTEREST_SEPARATOR);
        let u = embed_text(embedder, &text)?;
        for item in future {
            let e = item_embeddings
                .get(item)
                .ok_or_else(|| Error::contract(format!("no embedding for item {item}")))?;
            total += cosine(&u, e)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::contract("interest quality needs at least one future item"));
    }
    Ok(total / pairs as f64)
}

/// Beam-search rankings for every example, in input order.
pub fn rank_examples(model: &GenModel, examples: &[Example], table: &SidTable, trie: &SidTrie, cfg: &EvalCfg) -> Result<Vec<Vec<String>>> {
    let max_len = table.levels() + 1;
    examples
        .par_iter()
        .map(|ex| {
            let x = encode_history(table, model.vocab(), &ex.history, cfg.n_hist)?;
            Ok(beam_search(model, &x, trie, cfg.beam, max_len)?
                .into_iter()
                .map(|h| h.item)
                .collect())
        })
        .collect()
}

/// HR@K and NDCG@K of the model's beam rankings on `examples`.
pub fn evaluate(model: &GenModel, examples: &[Example], table: &SidTable, trie: &SidTrie, cfg: &EvalCfg) -> Result<MetricsReport> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let rankings = rank_examples(model, examples, table, trie, cfg)?;
    let targets: Vec<String> = examples.iter().map(|e| e.target.clone()).collect();
    let mut report = MetricsReport {
        n_users: examples.len(),
        ..MetricsReport::default()
    };
    for &k in &cfg.ks {
        report.hr.insert(k, hit_rate(&rankings, &targets, k)?);
        report.ndcg.insert(k, ndcg(&rankings, &targets, k)?);
    }
    Ok(report)
}

/// Evaluate a model trained on one corpus against another: the second
/// corpus's items are quantized with the first corpus's codebooks and the
/// model runs unchanged over the rebuilt trie.
pub fn transfer_eval(
    codebooks: &Codebooks,
    model: &GenModel,
    target_embeddings: &BTreeMap<String, EmbeddingVector>,
    target_test: &[Example],
    cfg: &EvalCfg,
) -> Result<MetricsReport> {
    if let Some((item, e)) = target_embeddings.iter().find(|(_, e)| e.dim() != codebooks.dim) {
        return Err(Error::contract(format!(
            "item {item} has dimension {} but the codebooks expect {}",
            e.dim(),
            codebooks.dim
        )));
    }
    let table = assign_sids(codebooks, target_embeddings)?;
    let needed = table.disambiguator_count();
    if needed > model.vocab().disambiguators {
        return Err(Error::contract(format!(
            "transfer corpus needs {needed} disambiguators, the model vocabulary has {}",
            model.vocab().disambiguators
        )));
    }
    let trie = SidTrie::build(&table);
    evaluate(model, target_test, &table, &trie, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hit_rate_cases() {
        assert_eq!(hit_rate(&[r(&["t", "x"])], &r(&["t"]), 5).unwrap(), 1.0);
        assert_eq!(hit_rate(&[r(&["x", "y"])], &r(&["t"]), 5).unwrap(), 0.0);
        let mut a: Vec<String> = (0..20).map(|i| format!("x{i}")).collect();
        let mut b = a.clone();
        let mut c = a.clone();
        a[1] = "t".into();
        b[6] = "t".into();
        c[10] = "t".into();
        let hr = hit_rate(&[a, b, c], &r(&["t", "t", "t"]), 10).unwrap();
        assert!((hr - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg(&[r(&["t"])], &r(&["t"]), 5).unwrap(), 1.0);
        assert_eq!(ndcg(&[r(&["a", "b", "t"])], &r(&["t"]), 5).unwrap(), 0.5);
        let v = ndcg(&[r(&["t"]), r(&["a", "b", "c", "t"])], &r(&["t", "t"]), 5).unwrap();
        assert!((v - (1.0 + 1.0 / 5f64.log2()) / 2.0).abs() < 1e-12);
        assert!((v - 0.7153).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch() {
        assert!(hit_rate(&[], &[], 5).is_err());
        assert!(ndcg(&[r(&["a"])], &r(&["a", "b"]), 5).is_err());
    }

    #[test]
    fn table_renders() {
        let rep = MetricsReport {
            arm: "full".into(),
            dataset: "synthetic".into(),
            hr: BTreeMap::from([(5, 0.25), (10, 0.5)]),
            ndcg: BTreeMap::from([(5, 0.125), (10, 0.25)]),
            iq: None,
            n_users: 4,
            ..MetricsReport::default()
        };
        let t = format_table(&[rep]);
        assert!(t.contains("HR@10"));
        assert!(t.contains("0.5000"));
    }
}
