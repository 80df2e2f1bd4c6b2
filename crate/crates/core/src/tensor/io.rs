//! TNS tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TNS1"            4 bytes magic
//! dtype             u8 (1 = f32, 2 = f64)
//! rank              u8
//! dims              rank × u32
//! payload           row-major scalars
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNS1";

impl<T: Scalar> Tensor<T> {
    /// Serialized size in bytes.
    pub fn tns_len(&self) -> usize {
        4 + 2 + 4 * self.rank() + self.size_bytes()
    }

    pub fn to_tns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tns_len());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in self.data() {
            x.write_le(&mut out);
        }
        out
    }

    /// Decodes one TNS blob. Trailing bytes are an error.
    pub fn from_tns_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Data(format!(
                "TNS: {} trailing bytes after payload ending at offset {used}",
                bytes.len() - used
            )));
        }
        Ok(t)
    }

    /// Decodes a TNS blob at the start of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let header = read_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Data(format!(
                "TNS: file holds {} but {} was requested",
                header.dtype,
                T::DTYPE
            )));
        }
        let elem = T::DTYPE.size();
        let count: usize = header.shape.iter().product();
        let end = header.payload_offset + count * elem;
        if bytes.len() < end {
            return Err(Error::Data(format!(
                "TNS: payload truncated at byte offset {} (expected {end} bytes)",
                bytes.len()
            )));
        }
        let data = bytes[header.payload_offset..end]
            .chunks_exact(elem)
            .map(T::read_le)
            .collect();
        Ok((Tensor::from_vec(&header.shape, data)?, end))
    }

    pub fn write_tns<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_tns_bytes())?;
        Ok(())
    }

    pub fn read_tns<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_tns_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tns_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tns_bytes(&std::fs::read(path)?)
    }
}

/// Parsed TNS header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TnsHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload_offset: usize,
}

pub fn read_header(bytes: &[u8]) -> Result<TnsHeader> {
    if bytes.len() < 6 {
        return Err(Error::Data(format!(
            "TNS: header truncated at byte offset {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Data("TNS: bad magic at byte offset 0".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Data(format!("TNS: unknown dtype code {} at byte offset 4", bytes[4])))?;
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Data(format!("TNS: invalid rank {rank} at byte offset 5")));
    }
    let payload_offset = 6 + 4 * rank;
    if bytes.len() < payload_offset {
        return Err(Error::Data(format!(
            "TNS: dimension table truncated at byte offset {}",
            bytes.len()
        )));
    }
    let shape = (0..rank)
        .map(|i| {
            let at = 6 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        })
        .collect::<Vec<_>>();
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Data(format!(
            "TNS: zero dimension at byte offset {}",
            6 + 4 * i
        )));
    }
    Ok(TnsHeader {
        dtype,
        shape,
        payload_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_tns_bytes();
        let mut want = b"TNS1".to_vec();
        want.extend_from_slice(&[1, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(b.len(), t.tns_len());
    }

    #[test]
    fn rejects_malformed_input() {
        let t = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_tns_bytes();
        let err = Tensor::<f64>::from_tns_bytes(&b[..b.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(Tensor::<f32>::from_tns_bytes(&b).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Tensor::<f64>::from_tns_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Tensor::<f64>::from_tns_bytes(&extra).is_err());
    }
}
