//! Checkpoint container.
//!
//! Layout, integers little-endian u32 unless noted:
//!
//! ```text
//! "CADW" | version=1 | json_len | json (config + RNG state + best-epoch info)
//!        | tensor_count
//!        | per tensor: name_len | name | rank | extents | payload
//! ```
//!
//! Payload scalars use the precision recorded in the config; save followed
//! by load reproduces parameters, config, and RNG state bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Params, RngState, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAGIC: [u8; 4] = *b"CADW";
const VERSION: u32 = 1;

/// The JSON block: run configuration, training RNG position, and which
/// epoch the stored parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub rng: RngState,
    pub epoch: usize,
    pub val_accuracy: f64,
}

struct Cursor<'a> {
    path: &'a str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_string(),
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes the checkpoint. The stored config's precision field is forced to
/// the tensor element type so loads can verify it.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &Params<T>,
) -> Result<()> {
    let mut meta = meta.clone();
    meta.config.precision = T::PRECISION;
    let json = serde_json::to_vec(&meta)?;

    let names = params.names();
    let tensors = params.trainable();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in names.iter().zip(tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            buf.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn parse_meta<'a>(path: &'a str, bytes: &'a [u8]) -> Result<(CheckpointMeta, Cursor<'a>)> {
    let mut cur = Cursor {
        path,
        bytes,
        offset: 0,
    };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_string(),
            found: [magic[0], magic[1], magic[2], magic[3]],
            expected: MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion {
            path: path.to_string(),
            version,
        });
    }
    let json_len = cur.u32()? as usize;
    let json = cur.take(json_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(json)
        .map_err(|e| Error::BadCheckpoint(format!("{path}: config block: {e}")))?;
    Ok((meta, cur))
}

/// Reads only the JSON block; cheap way to learn precision and config
/// before choosing the element type.
pub fn peek_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    Ok(parse_meta(&name, &bytes)?.0)
}

/// Loads a checkpoint saved with element type `T`; a precision mismatch is
/// an error rather than a silent conversion.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, Params<T>)> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    let (meta, mut cur) = parse_meta(&name, &bytes)?;
    if meta.config.precision != T::PRECISION {
        return Err(Error::PrecisionMismatch {
            path: name,
            stored: meta.config.precision.name(),
            requested: T::PRECISION.name(),
        });
    }
    let count = cur.u32()? as usize;
    let width = T::PRECISION.byte_width();
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_bytes = cur.take(name_len)?;
        let tensor_name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = cur.take(len * width)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        named.push((tensor_name, Tensor::from_vec(shape, data)?));
    }
    if cur.offset != bytes.len() {
        return Err(Error::BadCheckpoint(format!(
            "{name}: {} trailing bytes after the last tensor",
            bytes.len() - cur.offset
        )));
    }
    let params = Params::from_named(&meta.config, named)?;
    Ok((meta, params))
}
