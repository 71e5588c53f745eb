//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use igr_core::genmodel::{encode_history, vocab_for_table};
use igr_core::tokenizer::{assign_sids, train_codebooks, TrainCfg};
use igr_core::{EmbeddingVector, GenModel, ModelConfig, SidTable, SidTrie, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

/// A tokenized catalogue, a model over it and one encoded query.
pub struct Fixture {
    pub table: SidTable,
    pub trie: SidTrie,
    pub model: GenModel,
    pub query: TokenSequence,
}

pub fn fixture(items: usize, d_model: usize, n_hist: usize) -> Fixture {
    let vecs = random_embeddings(items, 32, 1);
    let emb: BTreeMap<String, EmbeddingVector> = vecs
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("item{i:05}"), v.clone()))
        .collect();
    let cb = train_codebooks(&vecs, 3, 8, &TrainCfg { max_iters: 30, seed: 1 }).unwrap();
    let table = assign_sids(&cb, &emb).unwrap();
    let trie = SidTrie::build(&table);
    let cfg = ModelConfig {
        d_model,
        layers: 2,
        heads: 2,
        context: 128,
        seed: 1,
        ..ModelConfig::default()
    };
    let model = GenModel::new(cfg, vocab_for_table(&table, 8, 16)).unwrap();
    let history: Vec<String> = emb.keys().take(n_hist).cloned().collect();
    let query = encode_history(&table, model.vocab(), &history, n_hist).unwrap();
    Fixture {
        table,
        trie,
        model,
        query,
    }
}
