//! `KGEM` v1 binary matrix files plus a tab-separated text fallback.
//!
//! Layout (all little-endian):
//!
//! | offset | size | content                     |
//! |--------|------|-----------------------------|
//! | 0      | 4    | ASCII `KGEM`                |
//! | 4      | 4    | `u32` version, always 1     |
//! | 8      | 4    | `u32` row count             |
//! | 12     | 4    | `u32` column count          |
//! | 16     | 4·rc | `f32` values, row-major     |
//!
//! Writers always emit `KGEM`; readers also accept TSV (one row per line).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"KGEM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::input("row count exceeds u32"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::input("column count exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Matrix<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::input("KGEM header truncated"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::input("missing KGEM magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::input(format!("unsupported KGEM version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::input("KGEM dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::input(format!(
            "KGEM payload is {} bytes, header declares {rows}x{cols} ({expected} bytes)",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Parses tab-separated decimal rows. Blank lines are skipped.
pub fn parse_tsv<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split('\t')
            .map(|tok| {
                tok.trim().parse::<f64>().map(T::of).map_err(|e| {
                    Error::input(format!("line {}: bad value {tok:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    fs::write(path, encode(m)?)?;
    Ok(())
}

/// Reads a `KGEM` file, falling back to TSV when the magic is absent.
pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    let parsed = if bytes.starts_with(MAGIC) {
        decode(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::load(path, "neither KGEM nor UTF-8 text"))?;
        parse_tsv(text)
    };
    parsed.map_err(|e| Error::load(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let m = Matrix::from_rows(&[[1.0f64, -2.5], [0.0, 3.0], [4.0, 5.0]]).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[0..4], b"KGEM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn truncated_payload_rejected() {
        let m = Matrix::<f64>::zeros(2, 2);
        let mut bytes = encode(&m).unwrap();
        bytes.pop();
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode(&Matrix::<f64>::zeros(1, 1)).unwrap();
        bytes[4] = 2;
        assert!(decode::<f64>(&bytes).is_err());
    }

    #[test]
    fn tsv_parses_rows() {
        let m: Matrix<f64> = parse_tsv("1\t2\n3.5\t-4\n\n").unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 0)], 3.5);
        assert!(parse_tsv::<f64>("1\t2\n3\n").is_err());
        assert!(parse_tsv::<f64>("1\tx\n").is_err());
    }

    #[test]
    fn read_detects_format() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[[0.25f64, 0.5], [1.0, 2.0]]).unwrap();
        let bin = dir.path().join("m.kgem");
        write(&bin, &m).unwrap();
        assert_eq!(read::<f64>(&bin).unwrap(), m);
        let txt = dir.path().join("m.tsv");
        fs::write(&txt, "0.25\t0.5\n1\t2\n").unwrap();
        assert_eq!(read::<f64>(&txt).unwrap(), m);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_binary32_values(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in proptest::collection::vec(-1e6f32..1e6, 36),
        ) {
            let m = Matrix::from_fn(rows, cols, |i, j| seed[i * 6 + j] as f64);
            let back: Matrix<f64> = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
