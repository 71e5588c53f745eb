//! Semantic IDs from residual quantization of item embeddings.
//!
//! Level `h` quantizes the residual left by levels `1..h`; an item's SID is
//! the sequence of chosen centroid indices, and its reconstruction is the sum
//! of those centroids. Items that land on the same code path are told apart
//! by a trailing disambiguator.

mod kmeans;
mod trie;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};

pub use trie::{build_trie, SidSymbol, SidTrie};

pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg { max_iters: 100, seed: 0 }
    }
}

/// `levels` codebooks of `size` centroids each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub version: u32,
    pub levels: usize,
    pub size: usize,
    pub dim: usize,
    /// `centroids[h][k]` is the k-th centroid of level h.
    pub centroids: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    /// Mean squared residual norm entering each level, then after the last.
    #[serde(default)]
    pub residual_energy: Vec<f64>,
}

fn mean_energy(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / rows.len() as f64
}

/// Fit residual codebooks with `levels` levels of `size` entries.
pub fn train_codebooks(embeddings: &[EmbeddingVector], levels: usize, size: usize, cfg: &TrainCfg) -> Result<Codebooks> {
    if levels == 0 || size < 2 {
        return Err(Error::Config(vec![format!("need levels >= 1 and size >= 2 (got {levels}, {size})")]));
    }
    if embeddings.len() < size {
        return Err(Error::Training(format!(
            "{} embeddings cannot fill a codebook of {size} entries",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::contract(format!("mixed embedding dims {dim} and {}", bad.dim())));
    }
    if embeddings.iter().any(|e| e.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::contract("non-finite value in training embeddings"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut residuals: Vec<Vec<f64>> = embeddings.iter().map(|e| e.values.clone()).collect();
    let mut centroids = Vec::with_capacity(levels);
    let mut energy = vec![mean_energy(&residuals)];
    for h in 0..levels {
        let fit = kmeans::kmeans(&residuals, size, cfg.max_iters, &mut rng);
        log::debug!("level {h}: k-means converged in {} iterations", fit.iterations);
        for (r, &a) in residuals.iter_mut().zip(&fit.assignments) {
            for (x, c) in r.iter_mut().zip(&fit.centroids[a]) {
                *x -= c;
            }
        }
        energy.push(mean_energy(&residuals));
        centroids.push(fit.centroids);
    }
    Ok(Codebooks {
        version: CODEBOOK_VERSION,
        levels,
        size,
        dim,
        centroids,
        seed: cfg.seed,
        residual_energy: energy,
    })
}

/// A semantic ID: one code per level plus an optional collision index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sid {
    pub codes: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disambiguator: Option<u16>,
}

impl Sid {
    pub fn new(codes: Vec<u16>) -> Self {
        Sid {
            codes,
            disambiguator: None,
        }
    }

    /// Symbols along the SID's trie path.
    pub fn symbols(&self) -> Vec<SidSymbol> {
        let mut out: Vec<SidSymbol> = self
            .codes
            .iter()
            .enumerate()
            .map(|(level, &code)| SidSymbol::Code { level: level as u16, code })
            .collect();
        if let Some(d) = self.disambiguator {
            out.push(SidSymbol::Disambiguator(d));
        }
        out
    }

    /// Number of leading codes shared with `other`.
    pub fn common_prefix(&self, other: &Sid) -> usize {
        self.codes.iter().zip(&other.codes).take_while(|(a, b)| a == b).count()
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.codes.iter().map(|c| c.to_string()).collect();
        write!(f, "<{}>", codes.join("-"))?;
        if let Some(d) = self.disambiguator {
            write!(f, "#{d}")?;
        }
        Ok(())
    }
}

impl Codebooks {
    fn check_dim(&self, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::contract(format!(
                "vector dim {} does not match codebook dim {}",
                v.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Greedy nearest centroid per level; returns the SID and final residual.
    pub fn quantize_with_residual(&self, v: &EmbeddingVector) -> Result<(Sid, Vec<f64>)> {
        self.check_dim(v)?;
        let mut residual = v.values.clone();
        let mut codes = Vec::with_capacity(self.levels);
        for level in &self.centroids {
            let (k, _) = kmeans::nearest(&residual, level);
            for (r, c) in residual.iter_mut().zip(&level[k]) {
                *r -= c;
            }
            codes.push(k as u16);
        }
        Ok((Sid::new(codes), residual))
    }

    pub fn quantize(&self, v: &EmbeddingVector) -> Result<Sid> {
        Ok(self.quantize_with_residual(v)?.0)
    }

    /// Sum of the centroids a SID selects. The disambiguator is ignored.
    pub fn reconstruct(&self, sid: &Sid) -> Result<EmbeddingVector> {
        if sid.codes.len() != self.levels {
            return Err(Error::contract(format!(
                "SID has {} codes, codebooks have {} levels",
                sid.codes.len(),
                self.levels
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (h, &code) in sid.codes.iter().enumerate() {
            let c = self.centroids[h]
                .get(code as usize)
                .ok_or_else(|| Error::contract(format!("code {code} out of range at level {h}")))?;
            for (o, x) in out.iter_mut().zip(c) {
                *o += x;
            }
        }
        Ok(EmbeddingVector::new(out))
    }
}

/// Bijection between items and full SIDs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SidTable {
    by_item: BTreeMap<String, Sid>,
    by_sid: BTreeMap<Sid, String>,
    levels: usize,
}

/// One line of the SID table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidRecord {
    pub item: String,
    pub codes: Vec<u16>,
    pub disambiguator: Option<u16>,
}

impl SidTable {
    /// Build from explicit assignments; fails if two items share a full SID.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Sid)>) -> Result<Self> {
        let mut table = SidTable::default();
        for (item, sid) in pairs {
            if table.levels == 0 {
                table.levels = sid.codes.len();
            } else if sid.codes.len() != table.levels {
                return Err(Error::contract(format!("item {item}: SID length differs from the table")));
            }
            if let Some(prev) = table.by_sid.insert(sid.clone(), item.clone()) {
                return Err(Error::contract(format!("items {prev} and {item} share SID {sid}")));
            }
            if table.by_item.insert(item.clone(), sid).is_some() {
                return Err(Error::contract(format!("item {item} listed twice")));
            }
        }
        Ok(table)
    }

    pub fn sid(&self, item: &str) -> Option<&Sid> {
        self.by_item.get(item)
    }

    pub fn item(&self, sid: &Sid) -> Option<&str> {
        self.by_sid.get(sid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_item.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Sid)> {
        self.by_item.iter().map(|(i, s)| (i.as_str(), s))
    }

    /// Largest disambiguator plus one; 0 when no collisions.
    pub fn disambiguator_count(&self) -> usize {
        self.by_item
            .values()
            .filter_map(|s| s.disambiguator)
            .map(|d| d as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn records(&self) -> Vec<SidRecord> {
        self.iter()
            .map(|(item, sid)| SidRecord {
                item: item.to_string(),
                codes: sid.codes.clone(),
                disambiguator: sid.disambiguator,
            })
            .collect()
    }

    pub fn from_records(records: Vec<SidRecord>) -> Result<Self> {
        Self::from_pairs(records.into_iter().map(|r| {
            (
                r.item,
                Sid {
                    codes: r.codes,
                    disambiguator: r.disambiguator,
                },
            )
        }))
    }
}

/// Quantize every item; items sharing a code path get disambiguators
/// 0, 1, 2, ... in ascending item-id order.
pub fn assign_sids(cb: &Codebooks, items: &BTreeMap<String, EmbeddingVector>) -> Result<SidTable> {
    if items.is_empty() {
        return Err(Error::contract("no items to assign SIDs to"));
    }
    let mut groups: BTreeMap<Vec<u16>, Vec<&str>> = BTreeMap::new();
    for (item, v) in items {
        groups.entry(cb.quantize(v)?.codes).or_default().push(item);
    }
    let mut pairs = Vec::with_capacity(items.len());
    for (codes, members) in groups {
        let collide = members.len() > 1;
        for (d, item) in members.into_iter().enumerate() {
            pairs.push((
                item.to_string(),
                Sid {
                    codes: codes.clone(),
                    disambiguator: collide.then_some(d as u16),
                },
            ));
        }
    }
    SidTable::from_pairs(pairs)
}

/// Share of item pairs with equal level-1 code, split by whether the two
/// items share a group label. Returns `(intra, inter)`.
pub fn level1_agreement(table: &SidTable, groups: &BTreeMap<String, BTreeSet<usize>>) -> (f64, f64) {
    let items: Vec<(&Sid, &BTreeSet<usize>)> = table
        .iter()
        .filter_map(|(item, sid)| groups.get(item).map(|g| (sid, g)))
        .collect();
    let (mut intra, mut intra_n, mut inter, mut inter_n) = (0usize, 0usize, 0usize, 0usize);
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let same = items[a].0.codes[0] == items[b].0.codes[0];
            if items[a].1.intersection(items[b].1).next().is_some() {
                intra_n += 1;
                intra += usize::from(same);
            } else {
                inter_n += 1;
                inter += usize::from(same);
            }
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    (ratio(intra, intra_n), ratio(inter, inter_n))
}
