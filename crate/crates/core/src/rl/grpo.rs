use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_reward, normalize_advantages, ItemLabels, RlConfig};
use crate::error::{Error, Result};
use crate::genmodel::{log_softmax, sample_rollouts, GenModel, Optimizer, OptimizerKind, TokenSequence};
use crate::tokenizer::{SidTable, SidTrie};

/// One RL prompt: the encoded history and the true next item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoQuery {
    pub x: TokenSequence,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub mean_kl: f64,
    pub group_hit_rate: f64,
    /// Every reward scored during the step, query-major.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub group_hit_rate: f64,
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub policy: GenModel,
    pub curve: Vec<RewardPoint>,
    /// Mean group reward per epoch.
    pub epoch_rewards: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: usize,
    /// Distinct reward values scored during training, ascending.
    pub reward_values: Vec<f64>,
}

/// KL(p ‖ q) for two probability vectors.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn kl_from_log_probs(lp: &[f64], lr: &[f64]) -> f64 {
    lp.iter().zip(lr).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn check_compatible(policy: &GenModel, reference: &GenModel) -> Result<()> {
    if policy.vocab() != reference.vocab() || policy.config().context != reference.config().context {
        return Err(Error::contract("policy and reference disagree on vocabulary or context"));
    }
    Ok(())
}

/// Mean full-distribution KL(policy ‖ reference) over the target positions of `seq`.
pub fn kl_penalty(policy: &GenModel, reference: &GenModel, seq: &TokenSequence) -> Result<f64> {
    check_compatible(policy, reference)?;
    let len = seq.tokens.len();
    if seq.boundary == 0 || seq.boundary >= len {
        return Err(Error::contract("KL needs a non-empty target span"));
    }
    let input = &seq.tokens[..len - 1];
    let first = seq.boundary - 1;
    let p = policy.forward_from(input, first)?;
    let r = reference.forward_from(input, first)?;
    let total: f64 = (first..len - 1)
        .map(|t| kl_from_log_probs(&log_softmax(p.row(t)), &log_softmax(r.row(t))))
        .sum();
    Ok(total / (len - 1 - first) as f64)
}

fn query_seed(seed: u64, step: usize, query: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (query as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct QueryPart {
    rewards: Vec<f64>,
    advantages: Vec<f64>,
    kl: f64,
    hits: usize,
    loss: f64,
    grads: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn query_update(
    policy: &GenModel,
    reference: &GenModel,
    q: &GrpoQuery,
    trie: &SidTrie,
    table: &SidTable,
    labels: &ItemLabels,
    cfg: &RlConfig,
    seed: u64,
    scale: f64,
) -> Result<QueryPart> {
    let g = cfg.group_size;
    let rollouts = sample_rollouts(policy, &q.x, trie, g, cfg.temperature, seed)?;
    let mut rewards = Vec::with_capacity(g);
    let mut hits = 0;
    for r in &rollouts {
        let sid = table
            .sid(&r.item)
            .ok_or_else(|| Error::contract(format!("rollout item {} missing from the SID table", r.item)))?;
        rewards.push(compute_reward(&cfg.reward, sid, &q.target, table, labels)?);
        hits += usize::from(r.item == q.target);
    }
    let advantages = normalize_advantages(&rewards, cfg.std_epsilon);

    let v = policy.vocab().size();
    let mut grads = vec![0.0; policy.num_params()];
    let mut kl_sum = 0.0;
    let mut loss = 0.0;
    let gf = g as f64;
    for (r, &adv) in rollouts.iter().zip(&advantages) {
        let mut toks = q.x.history().to_vec();
        toks.extend_from_slice(&r.tokens);
        let first = q.x.boundary - 1;
        let input = &toks[..toks.len() - 1];
        let npos = r.tokens.len();
        let p = policy.forward_from(input, first)?;
        let refp = if cfg.beta > 0.0 {
            Some(reference.forward_from(input, first)?)
        } else {
            None
        };
        let mut dlogits = vec![0.0; npos * v];
        let mut seq_kl = 0.0;
        let mut seq_lp = 0.0;
        let mut node = SidTrie::ROOT;
        for k in 0..npos {
            let t = first + k;
            let lp = log_softmax(p.row(t));
            let target = r.tokens[k] as usize;
            // Policy term over the trie-constrained distribution the rollout
            // was drawn from (at unit temperature).
            let kids = trie.children(node);
            let valid: Vec<usize> = kids
                .iter()
                .map(|&(sym, _)| policy.vocab().token(sym).map(|x| x as usize))
                .collect::<Result<_>>()?;
            let masked = log_softmax(&valid.iter().map(|&i| p.row(t)[i]).collect::<Vec<_>>());
            let pick = valid
                .iter()
                .position(|&i| i == target)
                .ok_or_else(|| Error::contract("rollout token is not a trie child"))?;
            node = kids[pick].1;
            seq_lp += masked[pick];
            let d = &mut dlogits[k * v..(k + 1) * v];
            let pg = -adv / gf * scale;
            for (&i, l) in valid.iter().zip(&masked) {
                d[i] = -pg * l.exp();
            }
            d[target] += pg;
            if let Some(rf) = &refp {
                let lr = log_softmax(rf.row(t));
                let kl = kl_from_log_probs(&lp, &lr);
                seq_kl += kl;
                let w = cfg.beta / (gf * npos as f64) * scale;
                for i in 0..v {
                    d[i] += w * lp[i].exp() * (lp[i] - lr[i] - kl);
                }
            }
        }
        let mean_kl = seq_kl / npos as f64;
        kl_sum += mean_kl;
        loss += (-adv * seq_lp + cfg.beta * mean_kl) / gf;
        policy.backward_into(&p, &dlogits, &mut grads);
    }
    Ok(QueryPart {
        rewards,
        advantages,
        kl: kl_sum / gf,
        hits,
        loss,
        grads,
    })
}

/// One update on a batch of queries: sample a group per query, normalize
/// rewards within the group and descend
/// `−Σ_j Â_j/G · log π(y_j) + β · KL` averaged over queries, where `π` is
/// the trie-constrained policy and the KL is over the full vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut GenModel,
    reference: &GenModel,
    opt: &mut Optimizer,
    queries: &[GrpoQuery],
    trie: &SidTrie,
    table: &SidTable,
    labels: &ItemLabels,
    cfg: &RlConfig,
    step: usize,
) -> Result<StepMetrics> {
    check_compatible(policy, reference)?;
    if queries.is_empty() {
        return Err(Error::contract("empty GRPO batch"));
    }
    let scale = 1.0 / queries.len() as f64;
    let snapshot: &GenModel = policy;
    let parts: Vec<QueryPart> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            query_update(
                snapshot,
                reference,
                q,
                trie,
                table,
                labels,
                cfg,
                query_seed(cfg.seed, step, i),
                scale,
            )
        })
        .collect::<Result<_>>()?;

    let mut grads = vec![0.0; policy.num_params()];
    let mut m = StepMetrics::default();
    let mut hits = 0usize;
    let mut n = 0usize;
    for p in &parts {
        for (a, b) in grads.iter_mut().zip(&p.grads) {
            *a += b;
        }
        m.loss += p.loss * scale;
        m.mean_kl += p.kl * scale;
        m.mean_advantage += p.advantages.iter().sum::<f64>();
        m.rewards.extend_from_slice(&p.rewards);
        hits += p.hits;
        n += p.rewards.len();
    }
    m.mean_reward = m.rewards.iter().sum::<f64>() / n as f64;
    m.mean_advantage /= n as f64;
    m.group_hit_rate = hits as f64 / n as f64;
    if !m.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            step,
            detail: format!(
                "GRPO loss {} (mean reward {}, mean KL {})",
                m.loss, m.mean_reward, m.mean_kl
            ),
        });
    }
    opt.step(policy.params_mut(), &grads);
    Ok(m)
}

/// Run `cfg.epochs` passes over `queries` in fixed order.
pub fn grpo_train(
    mut policy: GenModel,
    reference: &GenModel,
    queries: &[GrpoQuery],
    trie: &SidTrie,
    table: &SidTable,
    labels: &ItemLabels,
    cfg: &RlConfig,
) -> Result<GrpoOutcome> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, policy.num_params());
    let mut curve = Vec::new();
    let mut epoch_rewards = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut seen: Vec<f64> = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in queries.chunks(cfg.batch_size) {
            let m = grpo_step(&mut policy, reference, &mut opt, batch, trie, table, labels, cfg, step)?;
            sum += m.rewards.iter().sum::<f64>();
            count += m.rewards.len();
            seen.extend_from_slice(&m.rewards);
            seen.sort_by(f64::total_cmp);
            seen.dedup();
            curve.push(RewardPoint {
                step,
                mean_reward: m.mean_reward,
                mean_kl: m.mean_kl,
                group_hit_rate: m.group_hit_rate,
            });
            step += 1;
        }
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        debug!("grpo epoch {epoch}: mean reward {mean:.4}");
        epoch_rewards.push(mean);
    }
    Ok(GrpoOutcome {
        policy,
        curve,
        epoch_rewards,
        steps: step,
        reward_values: seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::{encode_history, ModelConfig, Vocab};
    use crate::rl::RewardStrategy;
    use crate::tokenizer::Sid;
    use std::collections::BTreeMap;

    fn setup() -> (GenModel, SidTable, SidTrie, ItemLabels) {
        let table = SidTable::from_pairs([
            ("a".to_string(), Sid::new(vec![0, 0])),
            ("b".to_string(), Sid::new(vec![0, 1])),
            ("c".to_string(), Sid::new(vec![1, 0])),
            ("d".to_string(), Sid::new(vec![1, 1])),
        ])
        .unwrap();
        let trie = SidTrie::build(&table);
        let cfg = ModelConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            context: 16,
            seed: 3,
            ..ModelConfig::default()
        };
        let model = GenModel::new(cfg, Vocab::new(2, 2, 0)).unwrap();
        let labels = ItemLabels(BTreeMap::from([("a".into(), 1), ("c".into(), 1)]));
        (model, table, trie, labels)
    }

    #[test]
    fn closed_form_kl() {
        assert!((categorical_kl(&[0.5, 0.5], &[0.9, 0.1]) - 0.5108).abs() < 1e-4);
        assert_eq!(categorical_kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn self_kl_is_zero() {
        let (m, table, _, _) = setup();
        let seq = encode_history(&table, m.vocab(), &["a".into()], 3)
            .unwrap()
            .with_target(&table, m.vocab(), "d")
            .unwrap();
        assert!(kl_penalty(&m, &m, &seq).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (m, table, trie, labels) = setup();
        let q = GrpoQuery {
            x: encode_history(&table, m.vocab(), &["a".into()], 3).unwrap(),
            target: "b".into(),
        };
        let cfg = RlConfig {
            epochs: 0,
            ..RlConfig::default()
        };
        let out = grpo_train(m.clone(), &m, &[q], &trie, &table, &labels, &cfg).unwrap();
        assert_eq!(out.policy.params(), m.params());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn binary_rewards_stay_binary() {
        let (m, table, trie, labels) = setup();
        let q = GrpoQuery {
            x: encode_history(&table, m.vocab(), &["a".into()], 3).unwrap(),
            target: "b".into(),
        };
        let cfg = RlConfig {
            reward: RewardStrategy::rule_binary(),
            temperature: 1.0,
            ..RlConfig::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, m.num_params());
        let mut p = m.clone();
        let metrics = grpo_step(&mut p, &m, &mut opt, &[q], &trie, &table, &labels, &cfg, 0).unwrap();
        assert_eq!(metrics.rewards.len(), 10);
        assert!(metrics.rewards.iter().all(|&r| r == 0.0 || r == 1.0));
        assert!(metrics.mean_advantage.abs() < 1e-9);
    }

    #[test]
    fn seeded_steps_repeat() {
        let (m, table, trie, labels) = setup();
        let q = GrpoQuery {
            x: encode_history(&table, m.vocab(), &["c".into()], 3).unwrap(),
            target: "a".into(),
        };
        let cfg = RlConfig {
            temperature: 1.0,
            ..RlConfig::default()
        };
        let run = || grpo_train(m.clone(), &m, std::slice::from_ref(&q), &trie, &table, &labels, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy.params(), b.policy.params());
    }
}
