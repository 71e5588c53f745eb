//! Text embeddings: a deterministic signed-hash provider for offline runs, a
//! remote provider speaking a JSON embeddings API, and an on-disk cache.

use std::collections::hash_map::{Entry, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::ItemMeta;
use crate::error::{Error, Result};
use crate::mining::client::{json_at_path, HttpTransport, ProviderConfig};
use crate::mining::AggregatedInterests;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scale to unit length. Fails on zero or non-finite input.
    pub fn normalize(mut self) -> Result<Self> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("embedding has non-finite entries"));
        }
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::contract("cannot normalize a zero vector"));
        }
        for v in &mut self.values {
            *v /= norm;
        }
        self.normalized = true;
        Ok(self)
    }
}

/// Cosine similarity. Both vectors must share a dimension and be non-zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "cosine of vectors with dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that maps text to a unit-normalized vector of fixed dimension.
pub trait Embedder: Send + Sync {
    /// Stable identifier, part of cache keys.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Embed `text`, rejecting empty input.
pub fn embed_text(provider: &dyn Embedder, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::contract("cannot embed empty text"));
    }
    provider.embed_raw(text)
}

/// Separator between interest texts in a deep embedding input.
pub const INTEREST_SEPARATOR: &str = "; ";

/// The text a deep item embedding is computed from: interests joined in
/// their aggregated order.
pub fn deep_text(agg: &AggregatedInterests) -> Result<String> {
    if agg.interests.is_empty() {
        return Err(Error::contract(format!("item {} has no interests", agg.item)));
    }
    Ok(agg
        .interests
        .iter()
        .map(|i| i.text.as_str())
        .collect::<Vec<_>>()
        .join(INTEREST_SEPARATOR))
}

pub fn deep_item_embedding(provider: &dyn Embedder, agg: &AggregatedInterests) -> Result<EmbeddingVector> {
    embed_text(provider, &deep_text(agg)?)
}

/// Title and description embedding, used when interests are not available.
pub fn shallow_item_embedding(provider: &dyn Embedder, meta: &ItemMeta) -> Result<EmbeddingVector> {
    embed_text(provider, &meta.shallow_text())
}

/// Lowercased alphanumeric tokens. Text without any falls back to its trimmed form.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect();
    if tokens.is_empty() {
        vec![text.trim().to_lowercase()]
    } else {
        tokens
    }
}

/// 64-bit FNV-1a over `seed` then `bytes`.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing over the bag of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl LocalEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(vec![format!("embedding dim must be >= 8 (got {dim})")]));
        }
        Ok(LocalEmbedder { dim, seed })
    }

    /// Bucket and sign a token hashes to.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a(self.seed, token.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl Embedder for LocalEmbedder {
    fn id(&self) -> String {
        format!("local-{}-{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        let mut tokens = tokenize(text);
        let mut values = vec![0.0; self.dim];
        for tok in &tokens {
            let (b, s) = self.slot(tok);
            values[b] += s;
        }
        if values.iter().all(|v| *v == 0.0) {
            // every token cancelled out; fall back to the sorted multiset
            tokens.sort();
            let (b, s) = self.slot(&tokens.join(" "));
            values[b] = s;
        }
        EmbeddingVector::new(values).normalize()
    }
}

/// Embedding model behind an HTTP API taking `{model, input}`.
pub struct RemoteEmbedder {
    config: ProviderConfig,
    transport: HttpTransport,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(config: ProviderConfig, dim: usize) -> Result<Self> {
        let transport = HttpTransport::new(&config)?;
        Ok(RemoteEmbedder { config, transport, dim })
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}-{}", self.config.provider_id, self.config.model_name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        let body = serde_json::json!({ "model": self.config.model_name, "input": text });
        let response = self.transport.post_json(&body)?;
        let node = json_at_path(&response, &self.config.response_path).ok_or_else(|| {
            Error::parse(format!("embedding at `{}`", self.config.response_path), response.to_string())
        })?;
        let values: Vec<f64> = serde_json::from_value(node.clone())
            .map_err(|_| Error::parse("embedding values", node.to_string()))?;
        if values.len() != self.dim {
            return Err(Error::Provider {
                provider: self.config.provider_id.clone(),
                message: format!("expected dim {}, got {}", self.dim, values.len()),
            });
        }
        EmbeddingVector::new(values).normalize()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    values: Vec<f64>,
}

/// Wraps an embedder with a line-delimited on-disk cache keyed by a hash of
/// `(provider id, text)`.
pub struct CachedEmbedder<E> {
    inner: E,
    path: PathBuf,
    entries: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn open(inner: E, path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in crate::io::read_jsonl::<CacheLine>(path)? {
                entries.insert(line.key, line.values);
            }
        }
        Ok(CachedEmbedder {
            inner,
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(&self, text: &str) -> String {
        let mut bytes = self.inner.id().into_bytes();
        bytes.push(0);
        bytes.extend_from_slice(text.as_bytes());
        crate::io::content_hash(&bytes)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_raw(&self, text: &str) -> Result<EmbeddingVector> {
        let key = self.key(text);
        if let Some(values) = self.entries.lock().unwrap().get(&key) {
            return Ok(EmbeddingVector {
                values: values.clone(),
                normalized: true,
            });
        }
        let v = self.inner.embed_raw(text)?;
        let mut entries = self.entries.lock().unwrap();
        if let Entry::Vacant(slot) = entries.entry(key) {
            if let Some(parent) = self.path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
            let line = CacheLine {
                key: slot.key().clone(),
                values: v.values.clone(),
            };
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
            slot.insert(v.values.clone());
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::Interest;
    use proptest::prelude::*;

    fn local() -> LocalEmbedder {
        LocalEmbedder::new(64, 0).unwrap()
    }

    #[test]
    fn local_is_deterministic_and_bag_of_tokens() {
        let e = local();
        let a = embed_text(&e, "trail running shoes").unwrap();
        assert_eq!(a, embed_text(&e, "trail running shoes").unwrap());
        assert_eq!(a, embed_text(&e, "shoes trail running").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_oracle_dim16() {
        let e = LocalEmbedder::new(16, 0).unwrap();
        let hand = |tokens: &[&str]| {
            let mut v = [0.0; 16];
            for t in tokens {
                let h = fnv1a(0, t.as_bytes());
                v[(h % 16) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            }
            let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let ab = embed_text(&e, "a b").unwrap();
        let ac = embed_text(&e, "a c").unwrap();
        assert_eq!(ab.values, hand(&["a", "b"]));
        assert_eq!(ac.values, hand(&["a", "c"]));
        assert!(cosine(&ab, &ac).unwrap() < 1.0);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(embed_text(&local(), "  "), Err(Error::Contract(_))));
    }

    #[test]
    fn small_dim_rejected() {
        assert!(LocalEmbedder::new(4, 0).is_err());
    }

    #[test]
    fn cosine_closed_forms() {
        let v = EmbeddingVector::new(vec![0.3, -0.2, 0.9]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let x = EmbeddingVector::new(vec![1.0, 0.0]);
        let y = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        let d = EmbeddingVector::new(vec![1.0, 1.0]);
        assert!((cosine(&x, &d).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let z = EmbeddingVector::new(vec![0.0, 0.0]);
        assert!(cosine(&x, &z).is_err());
    }

    fn agg(texts: &[&str]) -> AggregatedInterests {
        AggregatedInterests::from_ranked(
            "i1",
            texts.iter().map(|t| Interest::new(*t, 1.0, "m")).collect(),
        )
    }

    #[test]
    fn deep_embedding_concatenates_in_order() {
        let e = local();
        let one = agg(&["home barista espresso"]);
        assert_eq!(
            deep_item_embedding(&e, &one).unwrap(),
            embed_text(&e, "home barista espresso").unwrap()
        );
        let two = agg(&["alpha beta", "gamma"]);
        assert_eq!(deep_text(&two).unwrap(), "alpha beta; gamma");
        assert_eq!(
            deep_item_embedding(&e, &two).unwrap(),
            embed_text(&e, "alpha beta; gamma").unwrap()
        );
        assert!(deep_item_embedding(&e, &agg(&[])).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let cached = CachedEmbedder::open(local(), &path).unwrap();
        let v = embed_text(&cached, "camping tent").unwrap();
        embed_text(&cached, "camping tent").unwrap();
        assert_eq!(cached.len(), 1);
        let reopened = CachedEmbedder::open(local(), &path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(embed_text(&reopened, "camping tent").unwrap().values, v.values);
    }

    proptest! {
        #[test]
        fn unit_norm_and_symmetric_cosine(a in "[a-z]{1,6}( [a-z]{1,6}){0,5}", b in "[a-z]{1,6}( [a-z]{1,6}){0,5}") {
            let e = local();
            let va = embed_text(&e, &a).unwrap();
            let vb = embed_text(&e, &b).unwrap();
            prop_assert!((va.norm() - 1.0).abs() < 1e-6);
            let ab = cosine(&va, &vb).unwrap();
            let ba = cosine(&vb, &va).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
