//! Binary checkpoint format.
//!
//! ```text
//! "MCAR"                      4 bytes
//! version                     u16
//! vocab_size, d_model, n_heads, d_ff, n_layers, max_seq_len   u32 each
//! dropout_rate                u64 (IEEE-754 bits of the f64)
//! every tensor, canonical order, row-major f64
//! checksum                    u64, first 8 bytes of SHA-256 of everything above
//! ```
//!
//! All integers and reals are little-endian. The canonical tensor order is
//! [`ParameterSet::named_tensors`].

use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ParameterSet};
use crate::numerics::Matrix;
use crate::store::write_atomic;

pub const MAGIC: &[u8; 4] = b"MCAR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint checksum mismatch")]
    BadChecksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    Trailing(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Short content hash of serialized checkpoint bytes, used to identify model
/// snapshots.
pub fn snapshot_hash(bytes: &[u8]) -> String {
    format!("{:016x}", checksum(bytes))
}

pub fn to_bytes(config: &ModelConfig, params: &ParameterSet) -> Result<Vec<u8>, CheckpointError> {
    params.check_config(config)?;
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        config.vocab_size,
        config.d_model,
        config.n_heads,
        config.d_ff,
        config.n_layers,
        config.max_seq_len,
    ] {
        let v = u32::try_from(v).map_err(|_| ModelError::Config(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&config.dropout_rate.to_bits().to_le_bytes());
    for (_, _, m) in params.named_tensors() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self.at.checked_add(N).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(slice.try_into().expect("slice has N bytes"))
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet), CheckpointError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    if bytes.len() < 14 {
        return Err(CheckpointError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(payload) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(CheckpointError::BadChecksum);
    }
    let mut r = Reader { bytes: payload, at: 6 };
    let config = ModelConfig {
        vocab_size: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        d_ff: r.u32()?,
        n_layers: r.u32()?,
        max_seq_len: r.u32()?,
        dropout_rate: f64::from_bits(u64::from_le_bytes(r.take()?)),
    };
    config.validate()?;
    // Build a correctly shaped skeleton, then fill it in canonical order.
    let mut params = skeleton(&config);
    for m in params.tensors_mut() {
        for v in m.data_mut() {
            *v = f64::from_le_bytes(r.take()?);
        }
    }
    if r.at != payload.len() {
        return Err(CheckpointError::Trailing(payload.len() - r.at));
    }
    for (name, _, m) in params.named_tensors() {
        if !m.is_finite() {
            return Err(ModelError::ParamShape(format!("{name} has non-finite entries")).into());
        }
    }
    Ok((config, params))
}

fn skeleton(config: &ModelConfig) -> ParameterSet {
    use crate::model::{HeadParams, LayerParams};
    let d = config.d_model;
    let dk = config.d_k();
    let z = Matrix::zeros;
    ParameterSet {
        token_embedding: z(config.vocab_size, d),
        position_embedding: z(config.max_seq_len, d),
        layers: (0..config.n_layers)
            .map(|_| LayerParams {
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        w_q: z(d, dk),
                        w_k: z(d, dk),
                        w_v: z(d, dk),
                    })
                    .collect(),
                w_o: z(d, d),
                ln1_gain: z(1, d),
                ln1_bias: z(1, d),
                ln2_gain: z(1, d),
                ln2_bias: z(1, d),
                ff1: z(d, config.d_ff),
                ff2: z(config.d_ff, d),
            })
            .collect(),
        final_ln_gain: z(1, d),
        final_ln_bias: z(1, d),
        head_weights: z(d, 1),
        head_bias: z(1, 1),
    }
}

/// Write atomically; returns the snapshot hash of the written bytes.
pub fn save(path: impl AsRef<Path>, config: &ModelConfig, params: &ParameterSet) -> Result<String, CheckpointError> {
    let bytes = to_bytes(config, params)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(snapshot_hash(&bytes))
}

/// Load and verify; also returns the snapshot hash.
pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterSet, String), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let (config, params) = from_bytes(&bytes)?;
    Ok((config, params, snapshot_hash(&bytes)))
}
