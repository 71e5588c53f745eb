use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{log_softmax, GenModel};
use super::optim::{Optimizer, OptimizerKind};
use super::{encode_history, TokenSequence};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::tokenizer::SidTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub n_hist: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for SftCfg {
    fn default() -> Self {
        SftCfg {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            n_hist: 20,
            seed: 0,
            max_steps: None,
        }
    }
}

impl SftCfg {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("sft lr must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            problems.push("sft epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            problems.push("sft batch_size must be >= 1".into());
        }
        if self.n_hist == 0 {
            problems.push("n_hist must be >= 1".into());
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub model: GenModel,
    pub curve: Vec<LossPoint>,
}

/// Negative log-likelihood of the target span and, optionally, its gradient.
pub fn sequence_nll(model: &GenModel, seq: &TokenSequence, scale: f64, grads: Option<&mut [f64]>) -> Result<f64> {
    let len = seq.tokens.len();
    if seq.boundary == 0 || seq.boundary >= len {
        return Err(Error::contract(format!(
            "sequence needs a non-empty history and target (boundary {}, length {len})",
            seq.boundary
        )));
    }
    let input = &seq.tokens[..len - 1];
    let first = seq.boundary - 1;
    let fwd = model.forward_from(input, first)?;
    let v = model.vocab().size();
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; (len - 1 - first) * v];
    for t in first..len - 1 {
        let target = seq.tokens[t + 1] as usize;
        let lp = log_softmax(fwd.row(t));
        loss -= lp[target];
        let d = &mut dlogits[(t - first) * v..(t - first + 1) * v];
        for (dv, l) in d.iter_mut().zip(&lp) {
            *dv = l.exp() * scale;
        }
        d[target] -= scale;
    }
    if let Some(g) = grads {
        model.backward_into(&fwd, &dlogits, g);
    }
    Ok(loss)
}

/// Mean target NLL over `batch` with exact gradients. Per-sequence work runs
/// in parallel; gradients are summed in batch order.
pub fn sft_loss(model: &GenModel, batch: &[TokenSequence]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::contract("empty SFT batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|seq| {
            let mut g = vec![0.0; model.num_params()];
            let loss = sequence_nll(model, seq, scale, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * scale, grads))
}

/// Encode training examples as history + target token sequences.
pub fn build_sft_batch(examples: &[Example], table: &SidTable, vocab: &super::Vocab, n_hist: usize) -> Result<Vec<TokenSequence>> {
    examples
        .iter()
        .map(|ex| encode_history(table, vocab, &ex.history, n_hist)?.with_target(table, vocab, &ex.target))
        .collect()
}

/// Mini-batch training on pre-encoded sequences.
pub fn sft_train_sequences(model: &mut GenModel, sequences: &[TokenSequence], cfg: &SftCfg) -> Result<Vec<LossPoint>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if sequences.is_empty() {
        return Err(Error::contract("no SFT training sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.num_params());
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'outer;
            }
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let (loss, grads) = sft_loss(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical {
                    step,
                    detail: format!("SFT loss {loss} at epoch {epoch}, batch of {}", batch.len()),
                });
            }
            opt.step(model.params_mut(), &grads);
            curve.push(LossPoint { step, loss });
            step += 1;
        }
        debug!("sft epoch {epoch}: last loss {:.4}", curve.last().map_or(f64::NAN, |p| p.loss));
    }
    Ok(curve)
}

/// Supervised fine-tuning on the training split.
pub fn sft_train(mut model: GenModel, train: &[Example], table: &SidTable, cfg: &SftCfg) -> Result<SftOutcome> {
    let sequences = build_sft_batch(train, table, model.vocab(), cfg.n_hist)?;
    let curve = sft_train_sequences(&mut model, &sequences, cfg)?;
    Ok(SftOutcome { model, curve })
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, Vocab};
    use super::*;

    fn seq() -> TokenSequence {
        TokenSequence {
            tokens: vec![14, 0, 4, 8, 12, 1, 5, 9, 13],
            boundary: 5,
        }
    }

    fn model(seed: u64) -> GenModel {
        let cfg = ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            context: 16,
            seed,
            ..ModelConfig::default()
        };
        GenModel::new(cfg, Vocab::new(4, 4, 0)).unwrap()
    }

    #[test]
    fn uniform_loss_closed_form() {
        let mut m = model(1);
        m.tensor_mut("head.w").unwrap().fill(0.0);
        m.tensor_mut("head.b").unwrap().fill(0.0);
        let (loss, _) = sft_loss(&m, &[seq()]).unwrap();
        let expected = 4.0 * (m.vocab().size() as f64).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut m = model(1);
        m.tensor_mut("head.w").unwrap().fill(0.0);
        // A single-target sequence whose target gets a huge bias.
        let s = TokenSequence {
            tokens: vec![14, 0, 4, 8, 12, 3],
            boundary: 5,
        };
        m.tensor_mut("head.b").unwrap()[3] = 60.0;
        let (loss, _) = sft_loss(&m, &[s]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn empty_target_rejected() {
        let m = model(1);
        let s = TokenSequence {
            tokens: vec![14, 0],
            boundary: 2,
        };
        assert!(sft_loss(&m, &[s]).is_err());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut m = model(3);
        let before = m.params().to_vec();
        let cfg = SftCfg {
            lr: 0.0,
            epochs: 2,
            ..SftCfg::default()
        };
        sft_train_sequences(&mut m, &[seq()], &cfg).unwrap();
        assert_eq!(m.params(), before.as_slice());
    }

    #[test]
    fn deterministic_curve() {
        let cfg = SftCfg {
            epochs: 5,
            batch_size: 1,
            ..SftCfg::default()
        };
        let data = vec![seq(), seq()];
        let a = sft_train_sequences(&mut model(4), &data, &cfg).unwrap();
        let b = sft_train_sequences(&mut model(4), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
