//! Binary tensor blobs.
//!
//! ```text
//! b"DAPT" | u32 version (=1) | u32 ndim | ndim × u32 dims | f32 payload
//! ```
//! All integers and floats little-endian, payload row-major.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"DAPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported blob version {0} (expected {VERSION})")]
    Version(u32),
    #[error("blob truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("blob has {0} trailing bytes")]
    Trailing(usize),
    #[error("blob header describes an invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, BlobError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(BlobError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, BlobError> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or(BlobError::Truncated {
            needed: 4,
            have: bytes.len(),
        })?
        .try_into()
        .unwrap();
    if &magic != MAGIC {
        return Err(BlobError::BadMagic(magic));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(BlobError::Version(version));
    }
    let ndim = read_u32(bytes, 8)? as usize;
    let header = 12 + 4 * ndim;
    if bytes.len() < header {
        return Err(BlobError::Truncated {
            needed: header,
            have: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| read_u32(bytes, 12 + 4 * i).map(|d| d as usize))
        .collect::<Result<_, _>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|_| shape.iter().all(|&d| d > 0))
        .ok_or_else(|| BlobError::InvalidShape(shape.clone()))?;
    let needed = header + 4 * numel;
    if bytes.len() < needed {
        return Err(BlobError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(BlobError::Trailing(bytes.len() - needed));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.clone(), data).map_err(|_| BlobError::InvalidShape(shape))
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<(), BlobError> {
    fs::write(path, encode(t)).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Tensor<f32>, BlobError> {
    let bytes = fs::read(path).map_err(|source| BlobError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DAPT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn row_major_payload_order() {
        // [[1,2,3],[4,5,6]] must serialise in exactly this order
        let t = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t);
        let payload: Vec<f32> = b[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.get(&[1, 0]), 4.0);
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode(&t);
        assert!(matches!(decode(&good[..good.len() - 2]), Err(BlobError::Truncated { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(BlobError::BadMagic(_))));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(BlobError::Version(2))));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode(&long), Err(BlobError::Trailing(1))));
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32 * 0.001).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
