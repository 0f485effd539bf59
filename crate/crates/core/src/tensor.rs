//! Dense row-major matrices, modality-tagged activation batches and the
//! column split/merge used to route channels into separate paths.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::mocd::ChannelPartition;

/// Dense row-major matrix of `f64`.
///
/// Zero-sized shapes (`T x 0`, `0 x N`) are legal: an empty channel set
/// produces a zero-width slice that still multiplies and adds correctly.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major values, rejecting length mismatches
    /// and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SplitqError::dims(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(SplitqError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SplitqError::dims("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Diagonal matrix with `diag` on the main diagonal.
    pub fn diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product. Every output element accumulates its inner products
    /// with `k` ascending, so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(SplitqError::dims(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(SplitqError::dims(format!(
                "{op} of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SplitqError::dims(format!(
                "add_assign of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Multiplies column `j` by `s[j]`.
    pub fn scale_cols(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.cols {
            return Err(SplitqError::dims(format!(
                "{} column scales for {} columns",
                s.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &f) in out.row_mut(i).iter_mut().zip(s) {
                *v *= f;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[f64]) -> Result<Matrix> {
        if s.len() != self.rows {
            return Err(SplitqError::dims(format!(
                "{} row scales for {} rows",
                s.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        for (i, &f) in s.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean of squared entries; zero for an empty matrix.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    /// Writes the columns of `src` into the columns `idx` of `self`.
    pub fn scatter_cols(&mut self, idx: &[usize], src: &Matrix) -> Result<()> {
        if src.rows != self.rows || src.cols != idx.len() {
            return Err(SplitqError::dims(format!(
                "scatter {:?} into {} columns of {:?}",
                src.shape(),
                idx.len(),
                self.shape()
            )));
        }
        for i in 0..self.rows {
            for (j, &c) in idx.iter().enumerate() {
                self.data[i * self.cols + c] = src.get(i, j);
            }
        }
        Ok(())
    }

    /// Relative Frobenius distance `||self - reference|| / ||reference||`;
    /// falls back to the absolute distance when the reference is zero.
    pub fn relative_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let base = reference.frobenius_norm();
        Ok(if base > 0.0 { diff / base } else { diff })
    }
}

/// Token modality. Serialized as `0 = Text`, `1 = Vision`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityTag {
    Text,
    Vision,
}

impl ModalityTag {
    pub fn to_byte(self) -> u8 {
        match self {
            ModalityTag::Text => 0,
            ModalityTag::Vision => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ModalityTag::Text),
            1 => Some(ModalityTag::Vision),
            _ => None,
        }
    }
}

/// Token-by-channel activations with one modality tag per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    data: Matrix,
    tags: Vec<ModalityTag>,
}

impl ActivationBatch {
    pub fn new(data: Matrix, tags: Vec<ModalityTag>) -> Result<Self> {
        if tags.len() != data.rows() {
            return Err(SplitqError::TagLengthMismatch {
                tags: tags.len(),
                rows: data.rows(),
            });
        }
        if data.rows() == 0 {
            return Err(SplitqError::dims("activation batch needs at least one token"));
        }
        Ok(Self { data, tags })
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn tags(&self) -> &[ModalityTag] {
        &self.tags
    }

    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// Row indices carrying `tag`, ascending.
    pub fn rows_with(&self, tag: ModalityTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == tag).then_some(i))
            .collect()
    }

    pub fn count(&self, tag: ModalityTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Sub-batch of the given token rows, in the given order.
    pub fn select_tokens(&self, idx: &[usize]) -> Result<ActivationBatch> {
        let tags = idx.iter().map(|&i| self.tags[i]).collect();
        ActivationBatch::new(self.data.select_rows(idx), tags)
    }

    pub fn into_parts(self) -> (Matrix, Vec<ModalityTag>) {
        (self.data, self.tags)
    }
}

/// Gathers the main, text and vision column groups of `x`, each in the
/// ascending order stored in the partition.
pub fn split_columns(x: &Matrix, partition: &ChannelPartition) -> Result<(Matrix, Matrix, Matrix)> {
    if partition.dim() != x.cols() {
        return Err(SplitqError::dims(format!(
            "partition over {} channels applied to {} columns",
            partition.dim(),
            x.cols()
        )));
    }
    Ok((
        x.select_cols(partition.main()),
        x.select_cols(partition.text()),
        x.select_cols(partition.vision()),
    ))
}

/// Inverse of [`split_columns`].
pub fn merge_columns(
    parts: (&Matrix, &Matrix, &Matrix),
    partition: &ChannelPartition,
) -> Result<Matrix> {
    let rows = parts.0.rows();
    let mut out = Matrix::zeros(rows, partition.dim());
    out.scatter_cols(partition.main(), parts.0)?;
    out.scatter_cols(partition.text(), parts.1)?;
    out.scatter_cols(partition.vision(), parts.2)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn split_gathers_ascending_columns() {
        let x = m(&[&[1., 2., 3.], &[4., 5., 6.]]);
        let p = ChannelPartition::new(3, vec![0, 2], vec![1], vec![]).unwrap();
        let (xm, xt, xv) = split_columns(&x, &p).unwrap();
        assert_eq!(xm, m(&[&[1., 3.], &[4., 6.]]));
        assert_eq!(xt, m(&[&[2.], &[5.]]));
        assert_eq!(xv.shape(), (2, 0));
        assert_eq!(merge_columns((&xm, &xt, &xv), &p).unwrap(), x);
    }

    #[test]
    fn identity_partition_split() {
        let x = m(&[&[1., 2.], &[3., 4.]]);
        let p = ChannelPartition::trivial(2);
        let (xm, xt, xv) = split_columns(&x, &p).unwrap();
        assert_eq!(xm, x);
        assert_eq!(xt.shape(), (2, 0));
        assert_eq!(xv.shape(), (2, 0));
    }

    #[test]
    fn split_rejects_wrong_universe() {
        let x = Matrix::zeros(2, 4);
        let p = ChannelPartition::trivial(3);
        assert!(matches!(
            split_columns(&x, &p),
            Err(SplitqError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(Matrix::identity(2).matmul(&b).unwrap(), b);
        assert_eq!(
            m(&[&[1., 2.]]).matmul(&m(&[&[3.], &[4.]])).unwrap(),
            m(&[&[11.]])
        );
        assert_eq!(b.matmul(&Matrix::zeros(2, 3)).unwrap(), Matrix::zeros(2, 3));
        assert!(b.matmul(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn zero_width_product_is_zero() {
        let a = Matrix::zeros(3, 0);
        let b = Matrix::zeros(0, 4);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(SplitqError::NonFinite { index: 1 })
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn batch_tag_checks() {
        let err = ActivationBatch::new(Matrix::zeros(2, 2), vec![ModalityTag::Text]).unwrap_err();
        assert!(err.to_string().contains("tag-length mismatch"));
        assert!(ActivationBatch::new(Matrix::zeros(0, 2), vec![]).is_err());
        let b = ActivationBatch::new(
            Matrix::zeros(3, 1),
            vec![ModalityTag::Vision, ModalityTag::Text, ModalityTag::Vision],
        )
        .unwrap();
        assert_eq!(b.rows_with(ModalityTag::Vision), vec![0, 2]);
        assert_eq!(b.count(ModalityTag::Text), 1);
    }
}
