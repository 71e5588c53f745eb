use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{log_softmax, GenModel};
use super::TokenSequence;
use crate::error::{Error, Result};
use crate::tokenizer::{Sid, SidSymbol, SidTrie};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHit {
    pub item: String,
    pub sid: Sid,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Hyp {
    node: usize,
    path: Vec<SidSymbol>,
    tokens: Vec<u32>,
    score: f64,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

fn prefixed(x: &TokenSequence, extra: &[u32]) -> Vec<u32> {
    let mut t = x.history().to_vec();
    t.extend_from_slice(extra);
    t
}

/// Trie-constrained beam search. Scores are sums of unmasked next-token
/// log-probabilities; only extensions that are trie children are kept.
pub fn beam_search(model: &GenModel, x: &TokenSequence, trie: &SidTrie, beam: usize, max_len: usize) -> Result<Vec<BeamHit>> {
    if beam == 0 {
        return Err(Error::contract("beam width must be >= 1"));
    }
    if trie.is_empty() {
        return Err(Error::contract("beam search over an empty trie"));
    }
    let vocab = *model.vocab();
    let mut alive = vec![Hyp {
        node: SidTrie::ROOT,
        path: Vec::new(),
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let expansions: Vec<Vec<Hyp>> = alive
            .par_iter()
            .map(|h| {
                let lp = log_softmax(&model.next_logits(&prefixed(x, &h.tokens))?);
                trie.children(h.node)
                    .iter()
                    .map(|&(sym, child)| {
                        let tok = vocab.token(sym)?;
                        let mut next = h.clone();
                        next.node = child;
                        next.path.push(sym);
                        next.tokens.push(tok);
                        next.score += lp[tok as usize];
                        Ok(next)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut cands: Vec<Hyp> = expansions.into_iter().flatten().collect();
        cands.sort_by(rank);
        cands.truncate(beam);
        alive.clear();
        for h in cands {
            if trie.item(h.node).is_some() {
                done.push(h);
            } else {
                alive.push(h);
            }
        }
    }
    done.sort_by(rank);
    done.truncate(beam);
    Ok(done
        .into_iter()
        .map(|h| BeamHit {
            item: trie.item(h.node).unwrap_or_default().to_string(),
            sid: SidTrie::sid_of_path(&h.path),
            log_prob: h.score,
        })
        .collect())
}

/// One sampled completion with the log-probabilities of the masked,
/// temperature-scaled distribution it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub item: String,
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
}

impl Rollout {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

fn valid_children(trie: &SidTrie, node: usize, model: &GenModel) -> Result<Vec<(u32, usize)>> {
    trie.children(node)
        .iter()
        .map(|&(sym, child)| Ok((model.vocab().token(sym)?, child)))
        .collect()
}

/// `g` independent ancestral samples under trie masking and temperature.
pub fn sample_rollouts(model: &GenModel, x: &TokenSequence, trie: &SidTrie, g: usize, temperature: f64, seed: u64) -> Result<Vec<Rollout>> {
    if g == 0 {
        return Err(Error::contract("rollout count must be >= 1"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    if trie.is_empty() {
        return Err(Error::contract("sampling over an empty trie"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memo: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(g);
    for _ in 0..g {
        let mut node = SidTrie::ROOT;
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        while trie.item(node).is_none() {
            let kids = valid_children(trie, node, model)?;
            if kids.is_empty() {
                return Err(Error::contract("trie node without children or item"));
            }
            let logits = match memo.get(&tokens) {
                Some(l) => l.clone(),
                None => {
                    let l = model.next_logits(&prefixed(x, &tokens))?;
                    memo.insert(tokens.clone(), l.clone());
                    l
                }
            };
            let scaled: Vec<f64> = kids.iter().map(|&(t, _)| logits[t as usize] / temperature).collect();
            let lp = log_softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = kids.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            tokens.push(kids[pick].0);
            log_probs.push(lp[pick]);
            node = kids[pick].1;
        }
        out.push(Rollout {
            item: trie.item(node).unwrap_or_default().to_string(),
            tokens,
            log_probs,
        });
    }
    Ok(out)
}

/// Highest-logit valid child at every step; ties go to the smaller symbol.
pub fn greedy_path(model: &GenModel, x: &TokenSequence, trie: &SidTrie) -> Result<(String, Vec<u32>)> {
    let mut node = SidTrie::ROOT;
    let mut tokens = Vec::new();
    while trie.item(node).is_none() {
        let kids = valid_children(trie, node, model)?;
        if kids.is_empty() {
            return Err(Error::contract("trie node without children or item"));
        }
        let logits = model.next_logits(&prefixed(x, &tokens))?;
        let mut best = 0;
        for i in 1..kids.len() {
            if logits[kids[i].0 as usize] > logits[kids[best].0 as usize] {
                best = i;
            }
        }
        tokens.push(kids[best].0);
        node = kids[best].1;
    }
    Ok((trie.item(node).unwrap_or_default().to_string(), tokens))
}
