use std::collections::BTreeMap;

use igr_core::pipeline::{prepare, tokenize, PipelineConfig, ProviderMode};
use igr_core::tokenizer::{assign_sids, level1_agreement, train_codebooks, TrainCfg};
use igr_core::{EmbeddingVector, SidTrie};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Enumerate all K^H code paths. Each path is scored level by level with
/// the distance from that level's residual to the chosen centroid, and the
/// lexicographically smallest score wins (lowest codes on exact ties).
fn exhaustive_levelwise(cb: &igr_core::Codebooks, v: &[f64]) -> Vec<u16> {
    let (h, k) = (cb.levels, cb.size);
    let mut best: Option<(Vec<f64>, Vec<u16>)> = None;
    for n in 0..k.pow(h as u32) {
        let path: Vec<u16> = (0..h).rev().map(|l| ((n / k.pow(l as u32)) % k) as u16).collect();
        let mut r = v.to_vec();
        let mut score = Vec::with_capacity(h);
        for (l, &c) in path.iter().enumerate() {
            let cen = &cb.centroids[l][c as usize];
            score.push(dist2(&r, cen));
            for (x, y) in r.iter_mut().zip(cen) {
                *x -= y;
            }
        }
        let better = match &best {
            None => true,
            Some((s, _)) => score.iter().zip(s).find(|(a, b)| a != b).is_some_and(|(a, b)| a < b),
        };
        if better {
            best = Some((score, path));
        }
    }
    best.unwrap().1
}

/// Path whose summed centroids land closest to `v`.
fn exhaustive_joint(cb: &igr_core::Codebooks, v: &[f64]) -> Vec<u16> {
    let (h, k) = (cb.levels, cb.size);
    let mut best = (f64::INFINITY, vec![]);
    for n in 0..k.pow(h as u32) {
        let path: Vec<u16> = (0..h).rev().map(|l| ((n / k.pow(l as u32)) % k) as u16).collect();
        let mut rec = vec![0.0; v.len()];
        for (l, &c) in path.iter().enumerate() {
            for (x, y) in rec.iter_mut().zip(&cb.centroids[l][c as usize]) {
                *x += y;
            }
        }
        let e = dist2(v, &rec);
        if e < best.0 {
            best = (e, path);
        }
    }
    best.1
}

#[test]
fn quantize_matches_exhaustive_path_search() {
    let pts = points(20, 2, 3);
    let cb = train_codebooks(&pts, 2, 2, &TrainCfg { max_iters: 50, seed: 3 }).unwrap();
    let mut joint_agree = 0;
    for p in &pts {
        let (sid, residual) = cb.quantize_with_residual(p).unwrap();
        assert_eq!(sid.codes, exhaustive_levelwise(&cb, &p.values));
        joint_agree += usize::from(sid.codes == exhaustive_joint(&cb, &p.values));
        let rec = cb.reconstruct(&sid).unwrap();
        let err = dist2(&p.values, &rec.values).sqrt();
        let rnorm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - rnorm).abs() < 1e-12, "{err} vs {rnorm}");
    }
    // Residual quantization is greedy; it need not find the jointly best path.
    eprintln!("joint-optimal agreement {joint_agree}/20");
}

#[test]
fn synthetic_topics_share_first_level_codes() {
    let mut cfg = PipelineConfig::default().with_seed(7);
    cfg.tokenizer.levels = 3;
    cfg.tokenizer.codebook_size = 8;
    let prep = prepare(&cfg, ProviderMode::Mock).unwrap();
    let tok = tokenize(&cfg, &prep.embeddings.deep).unwrap();
    let truth = prep.corpus.truth.unwrap();
    let (intra, inter) = level1_agreement(&tok.table, &truth.item_topics);
    assert!(intra > inter, "intra {intra} inter {inter}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reconstruction_plus_residual_is_identity(seed in 0u64..1000, levels in 1usize..4) {
        let pts = points(30, 4, seed);
        let cb = train_codebooks(&pts, levels, 3, &TrainCfg { max_iters: 20, seed }).unwrap();
        for p in &pts {
            let (sid, residual) = cb.quantize_with_residual(p).unwrap();
            let rec = cb.reconstruct(&sid).unwrap();
            for ((x, r), e) in p.values.iter().zip(&rec.values).zip(&residual) {
                prop_assert!((x - r - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sids_unique_and_trie_complete(seed in 0u64..1000) {
        let pts = points(25, 3, seed);
        let items: BTreeMap<String, EmbeddingVector> =
            pts.into_iter().enumerate().map(|(i, p)| (format!("i{i}"), p)).collect();
        let vecs: Vec<EmbeddingVector> = items.values().cloned().collect();
        let cb = train_codebooks(&vecs, 2, 2, &TrainCfg { max_iters: 20, seed }).unwrap();
        let table = assign_sids(&cb, &items).unwrap();
        prop_assert_eq!(table.len(), 25);
        let trie = SidTrie::build(&table);
        prop_assert_eq!(trie.leaf_count(), 25);
        for (path, item) in trie.paths() {
            prop_assert_eq!(table.sid(&item), Some(&SidTrie::sid_of_path(&path)));
        }
    }
}
