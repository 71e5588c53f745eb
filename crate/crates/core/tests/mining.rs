use std::collections::BTreeSet;

use igr_core::embed::embed_text;
use igr_core::mining::aggregate_ensemble;
use igr_core::{cosine, Embedder, Interest, InterestSet, LocalEmbedder};
use proptest::prelude::*;

fn set(provider: &str, interests: &[(&str, f64)]) -> InterestSet {
    InterestSet::from_parsed("item1", provider, interests.iter().map(|(t, c)| (t.to_string(), *c)).collect())
}

/// Merge by connected components of the pairwise "cosine >= threshold"
/// graph, then rank. Matches greedy clustering whenever similarity is
/// transitive on the input, which holds for the fixtures below.
fn oracle(sets: &[InterestSet], emb: &dyn Embedder, threshold: f64) -> Vec<Interest> {
    let all: Vec<(Interest, String)> = sets
        .iter()
        .flat_map(|s| s.interests.iter().map(move |i| (i.clone(), s.provider.clone())))
        .collect();
    let vecs: Vec<_> = all.iter().map(|(i, _)| embed_text(emb, &i.text).unwrap()).collect();
    let n = all.len();
    let mut comp: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in 0..n {
            if cosine(&vecs[a], &vecs[b]).unwrap() >= threshold {
                let (ca, cb) = (comp[a], comp[b]);
                for c in comp.iter_mut() {
                    if *c == cb {
                        *c = ca;
                    }
                }
            }
        }
    }
    let roots: BTreeSet<usize> = comp.iter().copied().collect();
    let mut out: Vec<Interest> = roots
        .into_iter()
        .map(|r| {
            let members: Vec<&(Interest, String)> = (0..n).filter(|&i| comp[i] == r).map(|i| &all[i]).collect();
            let best = members
                .iter()
                .max_by(|a, b| a.0.confidence.total_cmp(&b.0.confidence).then_with(|| b.0.text.cmp(&a.0.text)))
                .unwrap();
            Interest {
                text: best.0.text.clone(),
                confidence: members.iter().map(|m| m.0.confidence).fold(f64::MIN, f64::max),
                sources: members.iter().map(|m| m.1.clone()).collect(),
                rldi: None,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.sources
            .len()
            .cmp(&a.sources.len())
            .then(b.confidence.total_cmp(&a.confidence))
            .then_with(|| a.text.cmp(&b.text))
    });
    out
}

fn four_providers() -> Vec<InterestSet> {
    vec![
        set("alpha", &[("home barista espresso", 0.7), ("trail running shoes", 0.9)]),
        set("beta", &[("home barista espresso", 0.8), ("vintage vinyl records", 0.6)]),
        set("gamma", &[("home barista espresso", 0.95)]),
        set("delta", &[("home barista espresso", 0.5), ("balcony herb garden", 0.75)]),
    ]
}

#[test]
fn four_provider_consensus_matches_oracle() {
    let emb = LocalEmbedder::new(64, 1).unwrap();
    let sets = four_providers();
    let got = aggregate_ensemble(&sets, &emb, 0.85).unwrap();
    let want = oracle(&sets, &emb, 0.85);
    assert_eq!(got.interests, want);
    assert_eq!(got.interests[0].text, "home barista espresso");
    assert_eq!(got.interests[0].support(), 4);
    assert_eq!(got.interests[0].confidence, 0.95);
    let rest: Vec<f64> = got.interests[1..].iter().map(|i| i.confidence).collect();
    assert_eq!(rest, vec![0.9, 0.75, 0.6]);
    assert!(got.interests[1..].iter().all(|i| !i.is_consensus()));
}

proptest! {
    #[test]
    fn provider_order_irrelevant(perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let emb = LocalEmbedder::new(64, 1).unwrap();
        let sets = four_providers();
        let shuffled: Vec<InterestSet> = perm.iter().map(|&i| sets[i].clone()).collect();
        let a = aggregate_ensemble(&sets, &emb, 0.85).unwrap();
        let b = aggregate_ensemble(&shuffled, &emb, 0.85).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn threshold_extremes(texts in proptest::collection::btree_set("[a-z]{3,8} [a-z]{3,8}", 1..8)) {
        let emb = LocalEmbedder::new(32, 2).unwrap();
        let texts: Vec<String> = texts.into_iter().collect();
        let half = texts.len() / 2;
        let sets = vec![
            InterestSet::from_parsed("item1", "p", texts[..half].iter().map(|t| (t.clone(), 0.5)).collect()),
            InterestSet::from_parsed("item1", "q", texts[half..].iter().map(|t| (t.clone(), 0.6)).collect()),
        ];
        // Nothing but identical text reaches a threshold above 1.
        let none = aggregate_ensemble(&sets, &emb, 1.0 + 1e-9).unwrap();
        prop_assert_eq!(none.count(), texts.len());
        // Every cosine clears -1: one cluster holding everything.
        let one = aggregate_ensemble(&sets, &emb, -1.0).unwrap();
        prop_assert_eq!(one.count(), 1);
        let providers = sets.iter().filter(|s| !s.interests.is_empty()).count();
        prop_assert_eq!(one.interests[0].support(), providers);
    }

    #[test]
    fn merged_count_never_grows(threshold in 0.0f64..1.0) {
        let emb = LocalEmbedder::new(64, 1).unwrap();
        let sets = four_providers();
        let distinct: BTreeSet<&str> = sets.iter().flat_map(|s| s.interests.iter().map(|i| i.text.as_str())).collect();
        let got = aggregate_ensemble(&sets, &emb, threshold).unwrap();
        prop_assert!(got.count() <= distinct.len());
        let sources: usize = got.interests.iter().map(|i| i.support()).sum();
        prop_assert!(sources >= 4);
    }
}
