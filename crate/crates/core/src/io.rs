//! Binary tensor dump (`.spqt`).
//!
//! Little-endian layout, no padding:
//!
//! ```text
//! magic    4 bytes  "SPQT"
//! version  u32      1
//! kind     u8       0 = Matrix, 1 = ActivationBatch
//! rows     u64
//! cols     u64
//! values   rows*cols f64, row-major
//! tags     rows bytes (kind 1 only), 0 = Text, 1 = Vision
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SplitqError};
use crate::tensor::{ActivationBatch, Matrix, ModalityTag};

pub const MAGIC: [u8; 4] = *b"SPQT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 8 + 8;

/// Contents of a tensor dump.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(Matrix),
    Batch(ActivationBatch),
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor::Matrix(m)
    }
}

impl From<ActivationBatch> for Tensor {
    fn from(b: ActivationBatch) -> Self {
        Tensor::Batch(b)
    }
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let (kind, m, tags) = match tensor {
        Tensor::Matrix(m) => (0u8, m, None),
        Tensor::Batch(b) => (1u8, b.data(), Some(b.tags())),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 8 + m.rows());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(tags) = tags {
        out.extend(tags.iter().map(|t| t.to_byte()));
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(SplitqError::Truncated("missing magic".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(SplitqError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SplitqError::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SplitqError::UnsupportedVersion(version));
    }
    let kind = bytes[8];
    if kind > 1 {
        return Err(SplitqError::Format(format!("unknown kind {kind}")));
    }
    let rows = usize::try_from(read_u64(bytes, 9))
        .map_err(|_| SplitqError::Format("row count overflows".into()))?;
    let cols = usize::try_from(read_u64(bytes, 17))
        .map_err(|_| SplitqError::Format("column count overflows".into()))?;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| SplitqError::Format("shape overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(SplitqError::Truncated(format!(
            "{rows}x{cols} values need {payload} bytes, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body[..payload]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = Matrix::new(rows, cols, values)?;
    let rest = &body[payload..];
    match kind {
        0 => {
            if !rest.is_empty() {
                return Err(SplitqError::Format(format!(
                    "{} trailing bytes after matrix payload",
                    rest.len()
                )));
            }
            Ok(Tensor::Matrix(matrix))
        }
        _ => {
            if rest.len() != rows {
                return Err(SplitqError::TagLengthMismatch {
                    tags: rest.len(),
                    rows,
                });
            }
            let tags = rest
                .iter()
                .map(|&b| {
                    ModalityTag::from_byte(b)
                        .ok_or_else(|| SplitqError::Format(format!("invalid modality tag {b}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::Batch(ActivationBatch::new(matrix, tags)?))
        }
    }
}

fn with_path(path: &Path, e: std::io::Error) -> SplitqError {
    SplitqError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| with_path(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| with_path(path, e))?)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    save_tensor(path, &Tensor::Matrix(m.clone()))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    match load_tensor(path)? {
        Tensor::Matrix(m) => Ok(m),
        Tensor::Batch(_) => Err(SplitqError::Format(
            "expected a matrix dump, found an activation batch".into(),
        )),
    }
}

pub fn save_batch(path: impl AsRef<Path>, b: &ActivationBatch) -> Result<()> {
    save_tensor(path, &Tensor::Batch(b.clone()))
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    match load_tensor(path)? {
        Tensor::Batch(b) => Ok(b),
        Tensor::Matrix(_) => Err(SplitqError::Format(
            "expected an activation batch dump, found a matrix".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> ActivationBatch {
        let m = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 2.5);
        ActivationBatch::new(
            m,
            vec![ModalityTag::Text, ModalityTag::Vision, ModalityTag::Text],
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Tensor::Batch(batch()));
        assert_eq!(&bytes[..4], b"SPQT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..17], &3u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 25 + 6 * 8 + 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 1, 0]);
    }

    #[test]
    fn tag_count_mismatch() {
        let mut bytes = encode(&Tensor::Batch(batch()));
        bytes.pop();
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("tag-length mismatch"), "{err}");
    }

    #[test]
    fn nan_rejected() {
        let mut bytes = encode(&Tensor::Matrix(Matrix::zeros(1, 2)));
        bytes[25 + 8..25 + 16].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode(&Tensor::Matrix(Matrix::zeros(2, 2)));
        let short = bytes[..bytes.len() - 1].to_vec();
        assert!(matches!(decode(&short), Err(SplitqError::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(SplitqError::BadMagic(_))));
        assert!(matches!(decode(b"SP"), Err(SplitqError::Truncated(_))));
    }

    #[test]
    fn zero_width_matrix_round_trips() {
        let m = Matrix::zeros(0, 5);
        let back = decode(&encode(&Tensor::Matrix(m.clone()))).unwrap();
        assert_eq!(back, Tensor::Matrix(m));
    }
}
