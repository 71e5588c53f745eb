//! Binary checkpoint: 8-byte magic, u32 version, u64 header length, JSON
//! header, then the parameters as little-endian f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{GenModel, ModelConfig, TensorSpec};
use super::vocab::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IGRCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub manifest: Vec<TensorSpec>,
    pub step: u64,
    pub seed: u64,
    /// Hash of the configuration that produced the checkpoint.
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: GenModel,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &GenModel, step: u64, config_hash: &str) -> Result<()> {
    let header = CheckpointHeader {
        version: VERSION,
        vocab: *model.vocab(),
        config: *model.config(),
        manifest: model.tensors().to_vec(),
        step,
        seed: model.config().seed,
        config_hash: config_hash.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(model.num_params() * 4);
    for &p in model.params() {
        payload.extend_from_slice(&(p as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract("not a model checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::contract(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(Error::contract("checkpoint payload is not a whole number of f32 values"));
    }
    let params: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = GenModel::from_params(header.config, header.vocab, params)?;
    if model.tensors() != header.manifest.as_slice() {
        return Err(Error::contract("checkpoint shape manifest does not match its hyperparameters"));
    }
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(path: &Path, model: &GenModel, step: u64, config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    write_checkpoint(std::io::BufWriter::new(fs::File::create(&tmp)?), model, step, config_hash)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            context: 10,
            seed: 11,
            ..ModelConfig::default()
        };
        let m = GenModel::new(cfg, Vocab::new(2, 4, 1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, 42, "abc").unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.header.step, 42);
        assert_eq!(back.header.config_hash, "abc");
        assert_eq!(back.model.params(), m.params());
        let toks = [9, 0, 5, 2];
        assert_eq!(back.model.forward(&toks).unwrap().logits, m.forward(&toks).unwrap().logits);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"not a checkpoint at all"[..]).is_err());
    }
}
