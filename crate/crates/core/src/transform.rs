//! Invertible per-path transforms `P` and the reconstruction objective.
//!
//! A layer `Y = XW` is rewritten as `(XP)(P^-1 W)`; `P` is either a
//! diagonal scaling or a small dense matrix with a cached inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SplitqError};
use crate::tensor::Matrix;

/// Magnitude bounds for diagonal entries.
pub const MIN_SCALE: f64 = 1e-6;
pub const MAX_SCALE: f64 = 1e6;
/// Floor applied to calibration column maxima before smoothing.
pub const SMOOTHING_EPS: f64 = 1e-6;
/// Migration strength of the activation-magnitude smoothing init.
pub const SMOOTHING_ALPHA: f64 = 0.5;
/// Largest tolerated `max |P Pinv - I|` for a dense transform.
pub const INVERSE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Diagonal,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Diagonal(Vec<f64>),
    Dense { p: Matrix, pinv: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    repr: Repr,
}

impl Transform {
    pub fn identity(dim: usize, kind: TransformKind) -> Self {
        let repr = match kind {
            TransformKind::Diagonal => Repr::Diagonal(vec![1.0; dim]),
            TransformKind::Dense => Repr::Dense {
                p: Matrix::identity(dim),
                pinv: Matrix::identity(dim),
            },
        };
        Self { repr }
    }

    /// Diagonal transform; every `|d_i|` must lie in `[1e-6, 1e6]`.
    pub fn diagonal(scales: Vec<f64>) -> Result<Self> {
        if let Some(d) = scales
            .iter()
            .find(|d| !(d.is_finite() && (MIN_SCALE..=MAX_SCALE).contains(&d.abs())))
        {
            return Err(SplitqError::config(format!(
                "diagonal scale {d} outside [{MIN_SCALE}, {MAX_SCALE}]"
            )));
        }
        Ok(Self {
            repr: Repr::Diagonal(scales),
        })
    }

    /// Positive diagonal transform from log-magnitudes, clamped into the
    /// allowed range. Calibration steps in this parameterization.
    pub fn diagonal_from_log(log_scales: &[f64]) -> Self {
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        Self {
            repr: Repr::Diagonal(log_scales.iter().map(|l| l.clamp(lo, hi).exp()).collect()),
        }
    }

    /// Dense transform; rejects `P` whose LU inverse leaves a residual
    /// `max |P Pinv - I|` above 1e-8.
    pub fn dense(p: Matrix) -> Result<Self> {
        if p.rows() != p.cols() {
            return Err(SplitqError::dims(format!(
                "dense transform must be square, got {:?}",
                p.shape()
            )));
        }
        let pinv = lu_inverse(&p)?;
        let residual = p
            .matmul(&pinv)?
            .sub(&Matrix::identity(p.rows()))?
            .max_abs();
        if residual > INVERSE_TOLERANCE {
            return Err(SplitqError::NotInvertible(format!(
                "inverse residual {residual:e} exceeds {INVERSE_TOLERANCE:e}"
            )));
        }
        Ok(Self {
            repr: Repr::Dense { p, pinv },
        })
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Diagonal(d) => d.len(),
            Repr::Dense { p, .. } => p.rows(),
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self.repr {
            Repr::Diagonal(_) => TransformKind::Diagonal,
            Repr::Dense { .. } => TransformKind::Dense,
        }
    }

    /// Diagonal entries, if this is a diagonal transform.
    pub fn scales(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Diagonal(d) => Some(d),
            Repr::Dense { .. } => None,
        }
    }

    /// `P` as a dense matrix.
    pub fn matrix(&self) -> Matrix {
        match &self.repr {
            Repr::Diagonal(d) => Matrix::diag(d),
            Repr::Dense { p, .. } => p.clone(),
        }
    }

    pub fn inverse_matrix(&self) -> Matrix {
        match &self.repr {
            Repr::Diagonal(d) => Matrix::diag(&d.iter().map(|v| 1.0 / v).collect::<Vec<_>>()),
            Repr::Dense { pinv, .. } => pinv.clone(),
        }
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        if n != self.dim() {
            return Err(SplitqError::dims(format!(
                "{what} of size {n} against transform of dim {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `X P`.
pub fn apply_right(x: &Matrix, t: &Transform) -> Result<Matrix> {
    t.check(x.cols(), "activation width")?;
    match &t.repr {
        Repr::Diagonal(d) => x.scale_cols(d),
        Repr::Dense { p, .. } => x.matmul(p),
    }
}

/// `P^-1 W`.
pub fn apply_inv_left(w: &Matrix, t: &Transform) -> Result<Matrix> {
    t.check(w.rows(), "weight height")?;
    match &t.repr {
        Repr::Diagonal(d) => {
            let mut out = w.clone();
            for (i, &di) in d.iter().enumerate() {
                out.row_mut(i).iter_mut().for_each(|v| *v /= di);
            }
            Ok(out)
        }
        Repr::Dense { pinv, .. } => pinv.matmul(w),
    }
}

/// Mean squared error over all elements.
pub fn recon_loss(y_hat: &Matrix, y_ref: &Matrix) -> Result<f64> {
    y_hat.sub(y_ref).map(|d| d.mean_square())
}

/// Initial transform for a path of width `dim`.
///
/// Without calibration data (or for dense transforms) this is the identity.
/// With data, a diagonal transform is initialised to
/// `d_i = max(eps, max_t |X_ti|)^-alpha`, which divides each channel by the
/// square root of its peak magnitude and moves that range into the weights.
pub fn init_transform(
    dim: usize,
    kind: TransformKind,
    x_calib: Option<&Matrix>,
) -> Result<Transform> {
    match (kind, x_calib) {
        (TransformKind::Diagonal, Some(x)) => {
            if x.cols() != dim {
                return Err(SplitqError::dims(format!(
                    "calibration data has {} columns for a transform of dim {dim}",
                    x.cols()
                )));
            }
            let scales = (0..dim)
                .map(|j| {
                    let peak = (0..x.rows()).fold(0.0f64, |m, i| m.max(x.get(i, j).abs()));
                    peak.max(SMOOTHING_EPS)
                        .powf(-SMOOTHING_ALPHA)
                        .clamp(MIN_SCALE, MAX_SCALE)
                })
                .collect();
            Transform::diagonal(scales)
        }
        _ => Ok(Transform::identity(dim, kind)),
    }
}

/// Inverse by LU decomposition with partial pivoting.
pub fn lu_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(SplitqError::dims("lu_inverse needs a square matrix"));
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.max_abs();
    for k in 0..n {
        let (pivot_row, pivot) = (k..n)
            .map(|i| (i, lu.get(i, k).abs()))
            .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if pivot <= f64::EPSILON * scale * n as f64 || pivot == 0.0 {
            return Err(SplitqError::NotInvertible(format!(
                "zero pivot in column {k}"
            )));
        }
        if pivot_row != k {
            for j in 0..n {
                let tmp = lu.get(k, j);
                lu.set(k, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            perm.swap(k, pivot_row);
        }
        let d = lu.get(k, k);
        for i in k + 1..n {
            let f = lu.get(i, k) / d;
            lu.set(i, k, f);
            for j in k + 1..n {
                lu.set(i, j, lu.get(i, j) - f * lu.get(k, j));
            }
        }
    }
    // Solve LU x = e_perm(j) for every column.
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let s: f64 = (0..i).map(|k| lu.get(i, k) * col[k]).sum();
            col[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| lu.get(i, k) * col[k]).sum();
            col[i] = (col[i] - s) / lu.get(i, i);
        }
        for (i, v) in col.iter().enumerate() {
            inv.set(i, j, *v);
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_application() {
        let t = Transform::diagonal(vec![2.0, 3.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(apply_right(&x, &t).unwrap().as_slice(), &[2.0, 3.0]);
        let t = Transform::diagonal(vec![2.0, 4.0]).unwrap();
        let w = Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        assert_eq!(apply_inv_left(&w, &t).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn identity_is_noop() {
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        for kind in [TransformKind::Diagonal, TransformKind::Dense] {
            let t = Transform::identity(4, kind);
            assert_eq!(apply_right(&x, &t).unwrap(), x);
            let w = x.transpose();
            assert_eq!(apply_inv_left(&w, &t).unwrap(), w);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let t = Transform::identity(3, TransformKind::Diagonal);
        assert!(apply_right(&Matrix::zeros(2, 2), &t).is_err());
        assert!(apply_inv_left(&Matrix::zeros(2, 2), &t).is_err());
    }

    #[test]
    fn recon_loss_examples() {
        let y = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(recon_loss(&y, &y).unwrap(), 0.0);
        assert_eq!(recon_loss(&y.map(|v| v + 1.0), &y).unwrap(), 1.0);
        let y_hat = Matrix::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(recon_loss(&y_hat, &y).unwrap(), 2.5);
        assert!(recon_loss(&y, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn init_examples() {
        let t = init_transform(3, TransformKind::Diagonal, None).unwrap();
        assert_eq!(t.scales().unwrap(), &[1.0, 1.0, 1.0]);
        let x = Matrix::from_rows(&[vec![-4.0, 0.5, 0.0], vec![2.0, -1.0, 0.0]]).unwrap();
        let t = init_transform(3, TransformKind::Diagonal, Some(&x)).unwrap();
        let d = t.scales().unwrap();
        assert_eq!(d[0], 0.5);
        assert_eq!(d[1], 1.0);
        // all-zero column: floored at eps before smoothing, never zero
        assert!((d[2] - 1e3).abs() < 1e-9);
        let dense = init_transform(2, TransformKind::Dense, Some(&x.select_cols(&[0, 1]))).unwrap();
        assert_eq!(dense.matrix(), Matrix::identity(2));
    }

    #[test]
    fn diagonal_bounds() {
        assert!(Transform::diagonal(vec![0.0]).is_err());
        assert!(Transform::diagonal(vec![1e7]).is_err());
        assert!(Transform::diagonal(vec![-2.0]).is_ok());
        let t = Transform::diagonal_from_log(&[100.0, -100.0]);
        assert_eq!(t.scales().unwrap(), &[MAX_SCALE.ln().exp(), MIN_SCALE.ln().exp()]);
    }

    #[test]
    fn lu_inverse_of_permutation_like_matrix() {
        let p = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let t = Transform::dense(p.clone()).unwrap();
        let prod = p.matmul(&t.inverse_matrix()).unwrap();
        assert!(prod.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn singular_dense_rejected() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            Transform::dense(p),
            Err(SplitqError::NotInvertible(_))
        ));
    }
}
