//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CDTRCKPT"
//! version    u32 LE
//! config     u32 LE byte length, then 7 × u64 LE fields and 1 × f64 LE dropout
//! count      u64 LE number of f64 parameters
//! params     count × f64 LE, in `RewardModelConfig::param_shapes` order
//! crc        u32 LE CRC-32 of every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{RewardModel, RewardModelConfig};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"CDTRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_BYTES: usize = 8 * 8;
const HEADER_BYTES: usize = 8 + 4 + 4 + CONFIG_BYTES + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },
    #[error("truncated or corrupt checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

fn encode(model: &RewardModel) -> Vec<u8> {
    let c = model.config();
    let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * model.param_count() + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(CONFIG_BYTES as u32).to_le_bytes());
    for v in [
        c.state_dim,
        c.action_dim,
        c.embed_dim,
        c.num_causal_layers,
        c.num_inseq_layers,
        c.num_heads,
        c.max_window,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(model: &RewardModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode(model))?;
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn decode(bytes: &[u8]) -> Result<RewardModel, CheckpointError> {
    if bytes.len() < 12 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated {
                expected: HEADER_BYTES,
                actual: bytes.len(),
            }
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32_at(bytes, 8);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    if bytes.len() < HEADER_BYTES {
        return Err(CheckpointError::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let config_len = u32_at(bytes, 12) as usize;
    if config_len != CONFIG_BYTES {
        return Err(CheckpointError::ConfigMismatch(format!(
            "config block is {config_len} bytes, expected {CONFIG_BYTES}"
        )));
    }
    let field = |i: usize| u64_at(bytes, 16 + 8 * i) as usize;
    let config = RewardModelConfig {
        state_dim: field(0),
        action_dim: field(1),
        embed_dim: field(2),
        num_causal_layers: field(3),
        num_inseq_layers: field(4),
        num_heads: field(5),
        max_window: field(6),
        dropout: f64::from_le_bytes(bytes[16 + 56..16 + 64].try_into().unwrap()),
    };
    let count = u64_at(bytes, 16 + CONFIG_BYTES) as usize;
    let expected = HEADER_BYTES
        .checked_add(count.checked_mul(8).unwrap_or(usize::MAX))
        .and_then(|n| n.checked_add(4))
        .unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - 4];
    let stored = u32_at(bytes, expected - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    config
        .validate()
        .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
    if count != config.param_count() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "{count} parameters stored, config implies {}",
            config.param_count()
        )));
    }
    let mut values = bytes[HEADER_BYTES..expected - 4]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = config
        .param_shapes()
        .into_iter()
        .map(|(_, shape)| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect()).expect("length checked")
        })
        .collect();
    RewardModel::from_parts(config, params).map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RewardModel, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &RewardModelConfig,
) -> Result<RewardModel, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
