//! The `CTF1` binary tensor container.
//!
//! Layout: the four magic bytes `CTF1`, a `u8` rank, `rank` little-endian
//! `u32` extents, then the row-major payload as little-endian IEEE-754 `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Dense;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CTF1";

/// A tensor of any rank as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn into_dense<const N: usize>(self) -> Result<Dense<N>> {
        let shape: [usize; N] = self.shape.clone().try_into().map_err(|_| {
            Error::Format(format!(
                "expected rank {N}, file has rank {}",
                self.shape.len()
            ))
        })?;
        Dense::from_vec(shape, self.data)
    }
}

impl<const N: usize> From<&Dense<N>> for RawTensor {
    fn from(t: &Dense<N>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Format(format!("rank {} does not fit in u8", shape.len())))?;
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(5 + 4 * shape.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(rank);
    for &dim in shape {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Format(format!("extent {dim} does not fit in u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<RawTensor> {
    let mut magic = [0u8; 4];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    bytes
        .read_exact(&mut rank)
        .map_err(|_| Error::Format("missing rank".into()))?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut dim = [0u8; 4];
        bytes
            .read_exact(&mut dim)
            .map_err(|_| Error::Format("truncated extents".into()))?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let count: usize = shape.iter().product();
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            count * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(RawTensor { shape, data })
}

pub fn write<const N: usize>(path: impl AsRef<Path>, t: &Dense<N>) -> Result<()> {
    let bytes = encode(&t.shape(), t.data())?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode(&fs::read(path)?)
}

pub fn read<const N: usize>(path: impl AsRef<Path>) -> Result<Dense<N>> {
    read_raw(path)?.into_dense()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_pinned() {
        let bytes = encode(&[2, 1], &[1.0, -2.0]).unwrap();
        assert_eq!(&bytes[..4], b"CTF1");
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &[2, 0, 0, 0]);
        assert_eq!(&bytes[9..13], &[1, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(decode(b"CTF2\x00").is_err());
        assert!(decode(b"CTF1").is_err());
        let mut bytes = encode(&[3], &[1.0, 2.0, 3.0]).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
        let raw = decode(&encode(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!(raw.into_dense::<2>().is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 0..5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed as f64).sin() * i as f64 - 0.5).collect();
            let back = decode(&encode(&shape, &data).unwrap()).unwrap();
            prop_assert_eq!(back.shape, shape);
            prop_assert_eq!(back.data, data);
        }
    }
}
