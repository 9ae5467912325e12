//! Binary checkpoints: magic, a length-prefixed JSON header, then raw
//! little-endian `f64` tensors in header order.

use std::io::Write;
use std::path::Path;

use e2urec_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"E2UCKPT\x01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lora_enabled: bool,
    base: Vec<Entry>,
    lora: Vec<Entry>,
    content_hash: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn content_hash(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn entries(names: Vec<String>, tensors: &[Tensor]) -> Vec<Entry> {
    names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| Entry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::with_capacity(8 * (self.base_count() + self.lora_count()));
        for t in self.base.iter().chain(&self.lora) {
            payload.extend_from_slice(&t.to_le_bytes());
        }
        let header = Header {
            config: self.config.clone(),
            lora_enabled: self.lora_enabled,
            base: entries(self.base_names(), &self.base),
            lora: entries(self.lora_names(), &self.lora),
            content_hash: content_hash(&payload),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC)
            .and_then(|_| f.write_all(&(json.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&json))
            .and_then(|_| f.write_all(&payload))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(corrupt("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        let expected: usize = header
            .base
            .iter()
            .chain(&header.lora)
            .map(|e| 8 * e.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(corrupt(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        if content_hash(payload) != header.content_hash {
            return Err(corrupt("content hash mismatch".into()));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8")));
        let mut read = |list: &[Entry]| -> Result<Vec<Tensor>> {
            list.iter()
                .map(|e| {
                    let n = e.shape.iter().product();
                    let data: Vec<f64> = chunks.by_ref().take(n).collect();
                    Ok(Tensor::new(e.shape.clone(), data)?)
                })
                .collect()
        };
        let base = read(&header.base)?;
        let lora = read(&header.lora)?;
        let mut params = ModelParams::init_shell(header.config, base, lora, header.lora_enabled);
        let names = params.base_names();
        let layout_ok = names.len() == header.base.len()
            && names.iter().zip(&header.base).all(|(n, e)| *n == e.name)
            && params
                .base
                .iter()
                .zip(ModelParams::expected_shapes(&params.config))
                .all(|(t, s)| t.shape() == s.as_slice());
        if !layout_ok {
            return Err(corrupt("tensor layout does not match the model config".into()));
        }
        if !params.lora.is_empty() && params.lora_names().len() != params.lora.len() {
            return Err(corrupt("adapter layout does not match the model config".into()));
        }
        params.lora_enabled &= !params.lora.is_empty();
        Ok(params)
    }

    /// Loads a checkpoint and checks it against the data vocabulary.
    pub fn load_for_vocab(path: &Path, vocab_size: usize) -> Result<Self> {
        let p = Self::load(path)?;
        if p.config.vocab_size != vocab_size {
            return Err(Error::Config(format!(
                "checkpoint vocab_size {} does not match data vocabulary of {vocab_size}",
                p.config.vocab_size
            )));
        }
        Ok(p)
    }
}
