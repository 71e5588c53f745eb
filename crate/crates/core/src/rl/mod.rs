//! Group-relative policy optimization over SID rollouts.

mod grpo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::AggregatedInterests;
use crate::tokenizer::{Sid, SidTable};

pub use grpo::{categorical_kl, grpo_step, grpo_train, kl_penalty, GrpoOutcome, GrpoQuery, RewardPoint, StepMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    RuleBinary,
    PrefixMatch,
    #[default]
    InterestAware,
}

/// Which item's label the interest bonus looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSubject {
    #[default]
    Predicted,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardStrategy {
    pub kind: RewardKind,
    pub alpha: f64,
    pub label_subject: LabelSubject,
}

impl Default for RewardStrategy {
    fn default() -> Self {
        RewardStrategy {
            kind: RewardKind::InterestAware,
            alpha: 0.5,
            label_subject: LabelSubject::Predicted,
        }
    }
}

impl RewardStrategy {
    pub fn rule_binary() -> Self {
        RewardStrategy {
            kind: RewardKind::RuleBinary,
            ..Self::default()
        }
    }

    pub fn prefix_match() -> Self {
        RewardStrategy {
            kind: RewardKind::PrefixMatch,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub std_epsilon: f64,
    pub seed: u64,
    pub reward: RewardStrategy,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 10,
            temperature: 0.5,
            beta: 0.001,
            lr: 1e-5,
            epochs: 2,
            batch_size: 16,
            std_epsilon: 1e-8,
            seed: 0,
            reward: RewardStrategy::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.group_size < 2 {
            problems.push(format!("rl group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("rl temperature must be > 0, got {}", self.temperature));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            problems.push(format!("rl beta must be >= 0, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("rl lr must be >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("rl batch_size must be >= 1".into());
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            problems.push("rl std_epsilon must be > 0".into());
        }
        if !(self.reward.alpha >= 0.0 && self.reward.alpha.is_finite()) {
            problems.push(format!("reward alpha must be >= 0, got {}", self.reward.alpha));
        }
        problems
    }
}

/// Reduce per-interest labels (top-ranked first) to one item label:
/// majority vote, ties broken by the top-ranked interest.
pub fn item_label(labels: &[u8]) -> u8 {
    if labels.is_empty() {
        return 0;
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => u8::from(labels[0] == 1),
    }
}

/// Item-level RLDI labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemLabels(pub BTreeMap<String, u8>);

impl ItemLabels {
    pub fn from_interests(aggs: &[AggregatedInterests]) -> Self {
        ItemLabels(
            aggs.iter()
                .map(|a| {
                    let labels: Vec<u8> = a.interests.iter().filter_map(|i| i.rldi).collect();
                    (a.item.clone(), item_label(&labels))
                })
                .collect(),
        )
    }

    /// Label of `item`; unknown items count as 0.
    pub fn get(&self, item: &str) -> u8 {
        self.0.get(item).copied().unwrap_or(0)
    }

    pub fn positive_share(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.values().filter(|&&l| l == 1).count() as f64 / self.0.len() as f64
    }
}

/// Reward for generating `generated` when `target` was the true next item.
pub fn compute_reward(strategy: &RewardStrategy, generated: &Sid, target: &str, table: &SidTable, labels: &ItemLabels) -> Result<f64> {
    let target_sid = table
        .sid(target)
        .ok_or_else(|| Error::contract(format!("reward target {target} has no SID")))?;
    let Some(predicted) = table.item(generated) else {
        return Ok(0.0);
    };
    let hit = if predicted == target { 1.0 } else { 0.0 };
    Ok(match strategy.kind {
        RewardKind::RuleBinary => hit,
        RewardKind::PrefixMatch => {
            let h = target_sid.codes.len().max(1);
            generated.common_prefix(target_sid) as f64 / h as f64
        }
        RewardKind::InterestAware => {
            let subject = match strategy.label_subject {
                LabelSubject::Predicted => predicted,
                LabelSubject::Target => target,
            };
            hit + strategy.alpha * f64::from(labels.get(subject))
        }
    })
}

/// Group-normalized advantages with population standard deviation; groups
/// whose spread is below `std_epsilon` get all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_epsilon: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_epsilon {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SidTable {
        SidTable::from_pairs([
            ("t".to_string(), Sid::new(vec![1, 2, 3, 4])),
            ("n".to_string(), Sid::new(vec![1, 2, 0, 0])),
            ("z".to_string(), Sid::new(vec![3, 3, 3, 3])),
        ])
        .unwrap()
    }

    fn labels() -> ItemLabels {
        ItemLabels(BTreeMap::from([("t".into(), 1), ("n".into(), 1), ("z".into(), 0)]))
    }

    #[test]
    fn label_reduction() {
        assert_eq!(item_label(&[1, 1, 0]), 1);
        assert_eq!(item_label(&[0]), 0);
        assert_eq!(item_label(&[1, 0]), 1);
        assert_eq!(item_label(&[0, 1]), 0);
        assert_eq!(item_label(&[]), 0);
    }

    #[test]
    fn interest_aware_table() {
        let (t, l) = (table(), labels());
        let s = RewardStrategy::default();
        let r = |item: &str, target: &str| compute_reward(&s, t.sid(item).unwrap(), target, &t, &l).unwrap();
        assert_eq!(r("t", "t"), 1.5);
        assert_eq!(r("n", "t"), 0.5);
        assert_eq!(r("z", "t"), 0.0);
        let mut l0 = labels();
        l0.0.insert("t".into(), 0);
        assert_eq!(compute_reward(&s, t.sid("t").unwrap(), "t", &t, &l0).unwrap(), 1.0);
    }

    #[test]
    fn target_label_switch() {
        let (t, l) = (table(), labels());
        let s = RewardStrategy {
            label_subject: LabelSubject::Target,
            ..RewardStrategy::default()
        };
        assert_eq!(compute_reward(&s, t.sid("z").unwrap(), "t", &t, &l).unwrap(), 0.5);
    }

    #[test]
    fn prefix_and_binary() {
        let (t, l) = (table(), labels());
        let p = RewardStrategy::prefix_match();
        assert_eq!(compute_reward(&p, t.sid("n").unwrap(), "t", &t, &l).unwrap(), 0.5);
        let b = RewardStrategy::rule_binary();
        assert_eq!(compute_reward(&b, t.sid("n").unwrap(), "t", &t, &l).unwrap(), 0.0);
        assert_eq!(compute_reward(&b, t.sid("t").unwrap(), "t", &t, &l).unwrap(), 1.0);
    }

    #[test]
    fn unknown_sid_scores_zero() {
        let (t, l) = (table(), labels());
        let ghost = Sid::new(vec![9, 9, 9, 9]);
        assert_eq!(compute_reward(&RewardStrategy::default(), &ghost, "t", &t, &l).unwrap(), 0.0);
        assert!(compute_reward(&RewardStrategy::default(), &ghost, "missing", &t, &l).is_err());
    }

    #[test]
    fn advantages() {
        assert_eq!(normalize_advantages(&[1.0, 0.0], 1e-8), vec![1.0, -1.0]);
        assert_eq!(normalize_advantages(&[0.7, 0.7, 0.7], 1e-8), vec![0.0; 3]);
        let a = normalize_advantages(&[1.5, 1.0, 0.5, 0.0], 1e-8);
        for (x, e) in a.iter().zip([1.3416, 0.4472, -0.4472, -1.3416]) {
            assert!((x - e).abs() < 1e-3);
        }
    }

    #[test]
    fn config_validation() {
        let bad = RlConfig {
            group_size: 1,
            beta: -1.0,
            ..RlConfig::default()
        };
        assert_eq!(bad.validate().len(), 2);
        assert!(RlConfig::default().validate().is_empty());
    }
}
