//! Autoregressive SID generation: vocabulary, model, training and decoding.

mod checkpoint;
mod decode;
mod model;
mod optim;
mod sft;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::SidTable;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use decode::{beam_search, greedy_path, sample_rollouts, BeamHit, Rollout};
pub use model::{log_softmax, softmax, Forward, GenModel, ModelConfig, TensorSpec};
pub use optim::{Optimizer, OptimizerKind};
pub use sft::{build_sft_batch, sequence_nll, sft_loss, sft_train, sft_train_sequences, LossPoint, SftCfg, SftOutcome};
pub use vocab::Vocab;

/// Default number of disambiguator tokens reserved in the vocabulary.
pub const DEFAULT_DISAMBIGUATORS: usize = 16;

/// Token ids with the index where the target span begins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub boundary: usize,
}

impl TokenSequence {
    pub fn history(&self) -> &[u32] {
        &self.tokens[..self.boundary]
    }

    pub fn target(&self) -> &[u32] {
        &self.tokens[self.boundary..]
    }

    /// Append the SID of `item` as the target span.
    pub fn with_target(mut self, table: &SidTable, vocab: &Vocab, item: &str) -> Result<Self> {
        let sid = table
            .sid(item)
            .ok_or_else(|| Error::contract(format!("target item {item} has no SID")))?;
        self.tokens.truncate(self.boundary);
        self.tokens.extend(vocab.encode_sid(sid)?);
        Ok(self)
    }
}

/// Vocabulary large enough for `table`, reserving at least `min_disambiguators`.
pub fn vocab_for_table(table: &SidTable, codebook_size: usize, min_disambiguators: usize) -> Vocab {
    Vocab::new(
        table.levels(),
        codebook_size,
        min_disambiguators.max(table.disambiguator_count()),
    )
}

/// BOS followed by the SIDs of the last `n_hist` items, oldest first.
pub fn encode_history(table: &SidTable, vocab: &Vocab, history: &[String], n_hist: usize) -> Result<TokenSequence> {
    let start = history.len().saturating_sub(n_hist);
    let mut tokens = vec![vocab.bos()];
    for item in &history[start..] {
        let sid = table
            .sid(item)
            .ok_or_else(|| Error::contract(format!("history item {item} has no SID")))?;
        tokens.extend(vocab.encode_sid(sid)?);
    }
    let boundary = tokens.len();
    Ok(TokenSequence { tokens, boundary })
}

/// Longest sequence `encode_history` + target can produce.
pub fn max_sequence_len(levels: usize, n_hist: usize, disambiguated: bool) -> usize {
    let per_item = levels + usize::from(disambiguated);
    1 + (n_hist + 1) * per_item
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Sid;

    fn table() -> SidTable {
        SidTable::from_pairs((0..30u16).map(|i| (format!("i{i:02}"), Sid::new(vec![i % 4, i / 4, 1, 2])))).unwrap()
    }

    #[test]
    fn empty_history() {
        let t = table();
        let v = vocab_for_table(&t, 8, 0);
        let seq = encode_history(&t, &v, &[], 20).unwrap();
        assert_eq!(seq.tokens, vec![v.bos()]);
        assert_eq!(seq.boundary, 1);
    }

    #[test]
    fn one_item() {
        let t = table();
        let v = vocab_for_table(&t, 8, 0);
        let seq = encode_history(&t, &v, &["i05".into()], 20).unwrap();
        assert_eq!(seq.tokens.len(), 5);
    }

    #[test]
    fn keeps_last_n() {
        let t = table();
        let v = vocab_for_table(&t, 8, 0);
        let hist: Vec<String> = (0..30).map(|i| format!("i{i:02}")).collect();
        let seq = encode_history(&t, &v, &hist, 20).unwrap();
        assert_eq!(seq.tokens.len(), 1 + 20 * 4);
        let expected: Vec<u32> = hist[10..]
            .iter()
            .flat_map(|i| v.encode_sid(t.sid(i).unwrap()).unwrap())
            .collect();
        assert_eq!(&seq.tokens[1..], expected.as_slice());
    }

    #[test]
    fn unknown_item() {
        let t = table();
        let v = vocab_for_table(&t, 8, 0);
        assert!(encode_history(&t, &v, &["nope".into()], 20).is_err());
    }

    #[test]
    fn target_span() {
        let t = table();
        let v = vocab_for_table(&t, 8, 0);
        let seq = encode_history(&t, &v, &["i01".into()], 5)
            .unwrap()
            .with_target(&t, &v, "i02")
            .unwrap();
        assert_eq!(seq.history().len(), 5);
        assert_eq!(seq.target(), v.encode_sid(t.sid("i02").unwrap()).unwrap().as_slice());
    }
}
