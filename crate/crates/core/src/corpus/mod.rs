//! Review-corpus ingestion, k-core filtering, chronological sequences and
//! leave-last-out splits.

mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, topic_keywords, SynthConfig, SyntheticCorpus, SyntheticGroundTruth};

/// One timestamped user-item event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    #[serde(alias = "reviewerID", alias = "user_id")]
    pub user: String,
    #[serde(alias = "asin", alias = "item_id")]
    pub item: String,
    #[serde(alias = "unixReviewTime", alias = "timestamp")]
    pub ts: i64,
}

/// Item text features. `image_caption` stands in for the product image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    #[serde(alias = "asin", alias = "item_id")]
    pub item: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_caption: Option<String>,
}

impl ItemMeta {
    pub fn new(item: impl Into<String>, title: impl Into<String>) -> Self {
        ItemMeta {
            item: item.into(),
            title: title.into(),
            description: String::new(),
            categories: Vec::new(),
            image_caption: None,
        }
    }

    /// Title and description joined; the input of the shallow embedding.
    pub fn shallow_text(&self) -> String {
        if self.description.is_empty() {
            self.title.clone()
        } else {
            format!("{} {}", self.title, self.description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    /// Item ids ascending by timestamp.
    pub items: Vec<String>,
}

/// A `(history, target)` example for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: String,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub item_universe: BTreeSet<String>,
}

/// Outcome of [`parse_reviews`].
#[derive(Debug, Clone, Default)]
pub struct ParsedReviews {
    pub interactions: Vec<Interaction>,
    pub skipped: usize,
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str) -> Option<T> {
    serde_json::from_str(line).ok()
}

/// Parse line-delimited review records `{user, item, ts}`.
///
/// Blank lines are ignored. Malformed lines are skipped and counted; more
/// than half malformed is treated as a corrupt file.
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<ParsedReviews> {
    let mut out = ParsedReviews::default();
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Ingestion(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        total += 1;
        match parse_line::<Interaction>(line) {
            Some(rec) if !rec.user.is_empty() && !rec.item.is_empty() && rec.ts >= 0 => {
                out.interactions.push(rec)
            }
            _ => out.skipped += 1,
        }
    }
    if total > 0 && out.skipped * 2 > total {
        return Err(Error::CorruptInput {
            malformed: out.skipped,
            total,
        });
    }
    if out.skipped > 0 {
        log::warn!("skipped {} malformed review lines of {}", out.skipped, total);
    }
    Ok(out)
}

/// Parse line-delimited item metadata. Records with an empty title are dropped.
pub fn parse_metadata<R: BufRead>(reader: R) -> Result<Vec<ItemMeta>> {
    let mut items = Vec::new();
    let mut total = 0usize;
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Ingestion(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        total += 1;
        match parse_line::<ItemMeta>(line) {
            Some(meta) if !meta.item.is_empty() && !meta.title.trim().is_empty() => items.push(meta),
            _ => skipped += 1,
        }
    }
    if total > 0 && skipped * 2 > total {
        return Err(Error::CorruptInput {
            malformed: skipped,
            total,
        });
    }
    Ok(items)
}

/// Keep the maximal sub-multiset of interactions in which every user and
/// every item has at least `k` interactions. Input order is preserved.
pub fn kcore_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k-core requires k >= 1");
    let mut alive = vec![true; interactions.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (rec, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(&rec.user).or_default() += 1;
            *item_deg.entry(&rec.item).or_default() += 1;
        }
        let mut changed = false;
        for (rec, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[rec.user.as_str()] < k || item_deg[rec.item.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(rec, _)| rec.clone())
        .collect()
}

/// Group interactions per user and order each group by timestamp.
///
/// Users appear in order of first occurrence; equal timestamps keep input order.
pub fn build_sequences(interactions: &[Interaction]) -> Vec<UserSequence> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<&Interaction>)> = Vec::new();
    for rec in interactions {
        let slot = *index.entry(&rec.user).or_insert_with(|| {
            groups.push((&rec.user, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(rec);
    }
    groups
        .into_iter()
        .map(|(user, mut recs)| {
            recs.sort_by_key(|r| r.ts);
            UserSequence {
                user: user.to_string(),
                items: recs.into_iter().map(|r| r.item.clone()).collect(),
            }
        })
        .collect()
}

/// Remove sequences too short to split. Returns the kept sequences and the
/// number dropped.
pub fn drop_short_sequences(sequences: Vec<UserSequence>, min_len: usize) -> (Vec<UserSequence>, usize) {
    let before = sequences.len();
    let kept: Vec<_> = sequences.into_iter().filter(|s| s.items.len() >= min_len).collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} users with fewer than {min_len} interactions");
    }
    (kept, dropped)
}

/// Leave-last-out split.
///
/// For a sequence `i_1..i_T` the test example predicts `i_T` from `i_1..i_{T-1}`,
/// the validation example predicts `i_{T-1}` from `i_1..i_{T-2}`, and the
/// training set holds every `(prefix, next)` pair whose prefix ends at one of
/// `i_1..i_{T-2}`.
pub fn leave_last_out_split(sequences: &[UserSequence]) -> Result<SplitDataset> {
    let short: Vec<&str> = sequences
        .iter()
        .filter(|s| s.items.len() < 3)
        .map(|s| s.user.as_str())
        .collect();
    if !short.is_empty() {
        return Err(Error::contract(format!(
            "sequences shorter than 3 for users: {}",
            short.join(", ")
        )));
    }
    let mut split = SplitDataset::default();
    for seq in sequences {
        let t = seq.items.len();
        split.item_universe.extend(seq.items.iter().cloned());
        for end in 1..=t - 2 {
            split.train.push(Example {
                user: seq.user.clone(),
                history: seq.items[..end].to_vec(),
                target: seq.items[end].clone(),
            });
        }
        split.valid.push(Example {
            user: seq.user.clone(),
            history: seq.items[..t - 2].to_vec(),
            target: seq.items[t - 2].clone(),
        });
        split.test.push(Example {
            user: seq.user.clone(),
            history: seq.items[..t - 1].to_vec(),
            target: seq.items[t - 1].clone(),
        });
    }
    Ok(split)
}

/// Counts of distinct users, distinct items and interactions.
pub fn corpus_stats(interactions: &[Interaction]) -> (usize, usize, usize) {
    let users: BTreeSet<&str> = interactions.iter().map(|r| r.user.as_str()).collect();
    let items: BTreeSet<&str> = interactions.iter().map(|r| r.item.as_str()).collect();
    (users.len(), items.len(), interactions.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, ts: i64) -> Interaction {
        Interaction {
            user: u.into(),
            item: i.into(),
            ts,
        }
    }

    fn seq(user: &str, items: &[&str]) -> UserSequence {
        UserSequence {
            user: user.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parse_empty_and_valid() {
        let parsed = parse_reviews("".as_bytes()).unwrap();
        assert!(parsed.interactions.is_empty());

        let text = r#"{"user":"u1","item":"a","ts":3}
{"user":"u2","item":"b","ts":1}
{"user":"u1","item":"c","ts":2}
"#;
        let parsed = parse_reviews(text.as_bytes()).unwrap();
        assert_eq!(
            parsed.interactions,
            vec![rec("u1", "a", 3), rec("u2", "b", 1), rec("u1", "c", 2)]
        );
    }

    #[test]
    fn parse_skips_malformed() {
        let text = "{\"user\":\"u1\",\"item\":\"a\",\"ts\":3}\nnot json\n{\"user\":\"u1\",\"item\":\"b\",\"ts\":4}\n";
        let parsed = parse_reviews(text.as_bytes()).unwrap();
        assert_eq!(parsed.interactions.len(), 2);
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn parse_rejects_mostly_garbage() {
        let text = "x\ny\n{\"user\":\"u1\",\"item\":\"a\",\"ts\":3}\n";
        assert!(matches!(
            parse_reviews(text.as_bytes()),
            Err(Error::CorruptInput { malformed: 2, total: 3 })
        ));
    }

    #[test]
    fn parse_accepts_amazon_field_names() {
        let text = r#"{"reviewerID":"A1","asin":"B0","unixReviewTime":1400000000,"overall":5.0}"#;
        let parsed = parse_reviews(text.as_bytes()).unwrap();
        assert_eq!(parsed.interactions, vec![rec("A1", "B0", 1_400_000_000)]);
    }

    #[test]
    fn kcore_empty_and_star() {
        assert!(kcore_filter(&[], 5).is_empty());
        let star: Vec<_> = (0..4).map(|i| rec("u", &format!("i{i}"), i)).collect();
        assert!(kcore_filter(&star, 5).is_empty());
    }

    #[test]
    fn kcore_cascades() {
        // removing item z leaves u3 with one interaction, so u3 goes too
        let mut data = Vec::new();
        for u in ["u1", "u2"] {
            for i in ["x", "y"] {
                data.push(rec(u, i, 0));
            }
        }
        data.push(rec("u3", "x", 0));
        data.push(rec("u3", "z", 0));
        let out = kcore_filter(&data, 2);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|r| r.item != "z" && r.user != "u3"));
    }

    #[test]
    fn sequences_sorted_and_stable() {
        let data = vec![rec("u", "a", 3), rec("u", "b", 1), rec("u", "c", 2)];
        assert_eq!(build_sequences(&data), vec![seq("u", &["b", "c", "a"])]);

        let data = vec![rec("u", "a", 5), rec("v", "x", 2), rec("u", "b", 1), rec("v", "y", 1)];
        assert_eq!(
            build_sequences(&data),
            vec![seq("u", &["b", "a"]), seq("v", &["y", "x"])]
        );

        let data = vec![rec("u", "p", 7), rec("u", "q", 7), rec("u", "r", 7)];
        assert_eq!(build_sequences(&data)[0].items, vec!["p", "q", "r"]);
    }

    #[test]
    fn split_five() {
        let split = leave_last_out_split(&[seq("u", &["a", "b", "c", "d", "e"])]).unwrap();
        assert_eq!(split.test[0].target, "e");
        assert_eq!(split.test[0].history, vec!["a", "b", "c", "d"]);
        assert_eq!(split.valid[0].target, "d");
        assert_eq!(split.valid[0].history, vec!["a", "b", "c"]);
        let targets: Vec<_> = split.train.iter().map(|e| e.target.as_str()).collect();
        assert_eq!(targets, vec!["b", "c", "d"]);
    }

    #[test]
    fn split_three_and_two() {
        let split = leave_last_out_split(&[seq("u", &["a", "b", "c"])]).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].history, vec!["a"]);
        assert_eq!(split.train[0].target, "b");

        let err = leave_last_out_split(&[seq("u", &["a", "b", "c"]), seq("short", &["a", "b"])]).unwrap_err();
        assert!(err.to_string().contains("short"));
    }

    #[test]
    fn drop_short_counts() {
        let (kept, dropped) = drop_short_sequences(vec![seq("a", &["x"]), seq("b", &["x", "y", "z"])], 3);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, 1);
    }
}
