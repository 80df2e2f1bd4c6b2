//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TNSC"  u32 version  u32 manifest_len  manifest (UTF-8 JSON)  blobs...
//! ```
//!
//! The manifest holds the model configuration, the init seed and one entry
//! per tensor: name, shape, byte offset of its blob relative to the first
//! blob, and blob length. Each blob is a complete TNS1 tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ManetConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ManetConfig,
    pub seed: u64,
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode<T: Scalar>(cfg: &ManetConfig, params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let bytes = t.to_tns_bytes();
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
            length: bytes.len() as u64,
        });
        blobs.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        seed: params.seed,
        dtype: T::DTYPE.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Data(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {at}")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ManetConfig, ModelParams<T>)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::Data("checkpoint: bad magic at byte 0".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Data(format!("checkpoint: unsupported version {version} at byte 4")));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Data(format!("checkpoint: manifest of {len} bytes runs past end of file")))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Data(format!("checkpoint manifest at byte 12: {e}")))?;
    if manifest.dtype != T::DTYPE.to_string() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let base = 12 + len;
    let blobs = &bytes[base..];
    let mut params = ModelParams::new(manifest.seed);
    let mut expected = 0u64;
    for e in &manifest.tensors {
        if e.offset != expected {
            return Err(Error::Data(format!(
                "checkpoint: {} starts at blob offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        let blob = blobs.get(start..end).ok_or_else(|| {
            Error::Data(format!("checkpoint: {} blob at byte {} is truncated", e.name, base + start))
        })?;
        let t = Tensor::<T>::from_tns_bytes(blob)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint: {} has shape {:?}, manifest says {:?}",
                e.name,
                t.shape(),
                e.shape
            )));
        }
        params.insert(e.name.clone(), t);
        expected += e.length;
    }
    if expected as usize != blobs.len() {
        return Err(Error::Data(format!(
            "checkpoint: {} trailing bytes after last blob",
            blobs.len() - expected as usize
        )));
    }
    manifest.config.validate()?;
    Ok((manifest.config, params))
}

/// Reads only the manifest's dtype, so callers can pick the scalar type.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Data("checkpoint: manifest runs past end of file".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Data(format!("checkpoint manifest at byte 12: {e}")))?;
    [DType::F32, DType::F64]
        .into_iter()
        .find(|d| d.to_string() == manifest.dtype)
        .ok_or_else(|| Error::Data(format!("checkpoint: unknown dtype {}", manifest.dtype)))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, cfg: &ManetConfig, params: &ModelParams<T>) -> Result<()> {
    fs::write(path, encode(cfg, params)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(ManetConfig, ModelParams<T>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ManetConfig::tiny(3);
        let p = init_params::<f32>(&cfg, 11).unwrap();
        let bytes = encode(&cfg, &p).unwrap();
        let (cfg2, p2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
        assert_eq!(encode(&cfg2, &p2).unwrap(), bytes);
        assert_eq!(peek_dtype(&bytes).unwrap(), DType::F32);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let cfg = ManetConfig::tiny(2);
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let bytes = encode(&cfg, &p).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<f64>(&long).is_err());
    }
}
