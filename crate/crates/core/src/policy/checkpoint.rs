use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{PolicyConfig, PolicyParams};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"PRLCKPT1";
const DIGEST_LEN: usize = 32;

/// Policy parameters together with everything needed to interpret them.
///
/// On disk: `MAGIC`, a little-endian `u64` header length, a JSON header
/// (config, vocabulary, stage, parameter count), the parameters as
/// little-endian `f64`, and a SHA-256 of all preceding bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub vocab: Vocabulary,
    pub params: PolicyParams,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    config: PolicyConfig,
    vocab: Vocabulary,
    param_count: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            stage: self.stage.clone(),
            config: self.params.config().clone(),
            vocab: self.vocab.clone(),
            param_count: self.params.len(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.params.flat() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Integrity(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a policy checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
        let raw = &body[header_end..];
        if raw.len() != header.param_count * 8 {
            return Err(corrupt("parameter block length does not match header"));
        }
        if header.vocab.len() != header.config.vocab_size {
            return Err(corrupt("vocabulary size does not match policy config"));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = PolicyParams::from_flat(&header.config, values)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(Self {
            stage: header.stage,
            vocab: header.vocab,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
