//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `MAGNETCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the raw little-endian tensor data. The header lists every tensor as
//! `{name, rows, cols, offset}` (offset in elements from the start of the
//! data block) together with the dtype, the model configuration and the
//! number of completed epochs.

use std::io::{Read, Write};
use std::path::Path;

use magnet_autograd::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::segmenter::ModelConfig;

pub const MAGIC: &[u8; 8] = b"MAGNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub epoch: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ParamStore<T>,
}

fn bad(msg: impl Into<String>) -> MagnetError {
    MagnetError::Checkpoint(msg.into())
}

pub fn encode<T: Scalar>(params: &ParamStore<T>, model: &ModelConfig, epoch: usize) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::new();
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        offset += t.len();
        data.extend(T::to_le_bytes_vec(t.data()));
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        epoch,
        model: model.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| MagnetError::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != version {
        return Err(bad("header version disagrees with file version"));
    }
    if header.dtype != T::DTYPE {
        return Err(bad(format!("checkpoint holds {} data, loader expects {}", header.dtype, T::DTYPE)));
    }
    let data = &body[hlen..];
    let width = std::mem::size_of::<T>();
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let n = e.rows * e.cols;
        let (start, end) = (e.offset * width, (e.offset + n) * width);
        if end > data.len() {
            return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
        }
        params.insert(e.name.clone(), Tensor::new(e.rows, e.cols, T::from_le_bytes_slice(&data[start..end]))?);
    }
    Ok(Checkpoint { header, params })
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>, model: &ModelConfig, epoch: usize) -> Result<()> {
    let bytes = encode(params, model, epoch)?;
    let mut f = std::fs::File::create(path).map_err(|e| MagnetError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| MagnetError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MagnetError::io(path, e))?;
    decode(&bytes)
}

/// Checks that `params` holds exactly the tensors a fresh model would create.
pub fn check_compatible<T: Scalar>(params: &ParamStore<T>, fresh: &ParamStore<T>) -> Result<()> {
    for (name, t) in fresh.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => return Err(bad(format!("{name}: shape {:?}, model expects {:?}", p.shape(), t.shape()))),
            Err(_) => return Err(bad(format!("missing tensor {name}"))),
        }
    }
    if let Some(extra) = params.names().find(|n| !fresh.contains(n)) {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.init_linear(1, "image.stage1.embed.w", 3, 4);
        s.init_full("image.stage1.norm.gamma", 1, 4, 1.0);
        s
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let s = store();
        let bytes = encode(&s, &ModelConfig::default(), 3).unwrap();
        let ck = decode::<f32>(&bytes).unwrap();
        assert_eq!(ck.header.epoch, 3);
        for (name, t) in s.iter() {
            assert_eq!(ck.params.get(name).unwrap(), t);
        }
        assert_eq!(ck.params.len(), s.len());
    }

    #[test]
    fn rejects_unknown_version_and_dtype() {
        let mut bytes = encode(&store(), &ModelConfig::default(), 0).unwrap();
        assert!(decode::<f64>(&bytes).is_err());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = decode::<f32>(&bytes).err().unwrap().to_string();
        assert!(err.contains("version 2"), "{err}");
        assert!(decode::<f32>(b"garbage").is_err());
    }
}
