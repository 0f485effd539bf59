//! Truncated SVD and the gated low-rank branches used for weight smoothing
//! and activation compensation.

use crate::error::{Result, SplitqError};
use crate::tensor::Matrix;
use crate::transform::{apply_inv_left, Transform};

const MAX_SWEEPS: usize = 80;

/// Leading `r` singular triplets of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `rows x r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `r x cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.sigma)
            .and_then(|us| us.matmul(&self.vt))
            .expect("factor shapes agree")
    }
}

/// One-sided Jacobi on the columns of `cols` (each of length `m`, with
/// `cols.len() <= m`). Rotations are accumulated into `v`, so on exit the
/// columns are mutually orthogonal and `A V` equals them.
fn one_sided_jacobi(cols: &mut [Vec<f64>], v: &mut [Vec<f64>]) -> Result<()> {
    let n = cols.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut *cols, &mut *v] {
                    let (lo, hi) = vecs.split_at_mut(q);
                    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (x, y) = (*a, *b);
                        *a = c * x - s * y;
                        *b = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(SplitqError::NoConvergence { sweeps: MAX_SWEEPS })
}

/// Rank-`r` truncated SVD by one-sided Jacobi rotations, which
/// diagonalise the smaller Gram matrix implicitly. Each left singular vector
/// is signed so its first nonzero entry is positive.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    let p = m.min(n);
    if r == 0 || r > p {
        return Err(SplitqError::config(format!(
            "rank {r} outside [1, {p}] for a {m}x{n} matrix"
        )));
    }
    // Orthogonalise the shorter side: columns of W when n <= m, else of W^T.
    let transposed = n > m;
    let a = if transposed { w.transpose() } else { w.clone() };
    let (len, count) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..count).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..count)
        .map(|j| (0..count).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    one_sided_jacobi(&mut cols, &mut v)?;

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let tiny = sigma_max * 1e-14 * len.max(count) as f64;
    // Left vectors (length `len`) and right vectors (length `count`).
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut sigma = Vec::with_capacity(r);
    for &j in order.iter().take(r) {
        let s = norms[j];
        let u = if s > tiny && s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            complete_basis(&left, len)
        };
        sigma.push(if s > tiny { s } else { 0.0 });
        left.push(u);
        right.push(v[j].clone());
    }

    // With W^T = L S R^T we have W = R S L^T, so the roles swap.
    let (mut u_vecs, mut v_vecs) = if transposed { (right, left) } else { (left, right) };
    for (u, vv) in u_vecs.iter_mut().zip(v_vecs.iter_mut()) {
        let peak = u.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if let Some(first) = u.iter().find(|x| x.abs() > 1e-12 * peak) {
            if *first < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
                vv.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    let u = Matrix::from_fn(m, r, |i, k| u_vecs[k][i]);
    let vt = Matrix::from_fn(r, n, |k, j| v_vecs[k][j]);
    Ok(SvdFactors { u, sigma, vt })
}

/// A unit vector orthogonal to `basis`, from Gram-Schmidt on the standard
/// basis.
fn complete_basis(basis: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut best: Vec<f64> = vec![0.0; len];
    let mut best_norm = -1.0;
    for e in 0..len {
        let mut cand: Vec<f64> = (0..len).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for b in basis {
                let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                cand.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if norm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}

/// `round(ratio * min(rows, cols))`, at least 1 and at most `min(rows, cols)`.
pub fn rank_for_ratio(ratio: f64, rows: usize, cols: usize) -> usize {
    let p = rows.min(cols);
    if p == 0 {
        return 0;
    }
    ((ratio * p as f64 + 0.5).floor() as usize).clamp(1, p)
}

/// Low-rank branch `U* diag(g) V_base` anchored to the SVD of the main-path
/// weight: `U* = P_m^-1 U_r` and `V_base = Sigma_r V_r^T`. Only the gate
/// `g` is learned. `U*` is derived from the current `P_m` on demand, so the
/// branch follows the transform as it is calibrated.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBranch {
    /// `U_r`, `D_m x r`.
    pub u_basis: Matrix,
    /// `Sigma_r V_r^T`, `r x D_out`.
    pub v_base: Matrix,
    pub gate: Vec<f64>,
}

impl LowRankBranch {
    pub fn new(u_basis: Matrix, v_base: Matrix, gate: Vec<f64>) -> Result<Self> {
        let r = gate.len();
        if u_basis.cols() != r || v_base.rows() != r {
            return Err(SplitqError::dims(format!(
                "branch factors {:?} and {:?} with {r} gates",
                u_basis.shape(),
                v_base.shape()
            )));
        }
        if gate.iter().any(|g| !g.is_finite()) {
            return Err(SplitqError::config("non-finite gate"));
        }
        Ok(Self {
            u_basis,
            v_base,
            gate,
        })
    }

    pub fn rank(&self) -> usize {
        self.gate.len()
    }

    pub fn u_star(&self, p_main: &Transform) -> Result<Matrix> {
        apply_inv_left(&self.u_basis, p_main)
    }

    /// `diag(gate) V_base`.
    pub fn v_star(&self) -> Matrix {
        self.v_base
            .scale_rows(&self.gate)
            .expect("gate length equals rank")
    }

    /// `U* V*`.
    pub fn product(&self, p_main: &Transform) -> Result<Matrix> {
        self.u_star(p_main)?.matmul(&self.v_star())
    }

    /// Squared Frobenius distance `||U* diag(g) V_base - target||^2` and its
    /// gradient with respect to the gate.
    pub fn gate_objective(&self, p_main: &Transform, target: &Matrix) -> Result<(f64, Vec<f64>)> {
        let u = self.u_star(p_main)?;
        let resid = u.matmul(&self.v_star())?.sub(target)?;
        let loss = resid.as_slice().iter().map(|v| v * v).sum();
        // d/dg_k = 2 sum_ij E_ij U_ik Vb_kj = 2 (U^T E Vb^T)_kk
        let ue = u.transpose().matmul(&resid)?;
        let grad = (0..self.rank())
            .map(|k| {
                2.0 * ue
                    .row(k)
                    .iter()
                    .zip(self.v_base.row(k))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        Ok((loss, grad))
    }
}

/// Builds a branch of rank `r` from the main-path weight and transform,
/// with the gate at all ones.
pub fn build_branch(w_main: &Matrix, p_main: &Transform, r: usize) -> Result<LowRankBranch> {
    if p_main.dim() != w_main.rows() {
        return Err(SplitqError::dims(format!(
            "transform dim {} for a weight with {} rows",
            p_main.dim(),
            w_main.rows()
        )));
    }
    let svd = truncated_svd(w_main, r)?;
    let v_base = svd.vt.scale_rows(&svd.sigma)?;
    LowRankBranch::new(svd.u, v_base, vec![1.0; r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::TransformKind;

    #[test]
    fn diagonal_svd() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let f = truncated_svd(&w, 2).unwrap();
        assert_eq!(f.sigma, vec![3.0, 1.0]);
        assert!(f.reconstruct().sub(&w).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn rank_one_svd() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let f = truncated_svd(&w, 1).unwrap();
        assert_eq!(f.sigma, vec![2.0]);
        assert_eq!(f.u.as_slice(), &[1.0, 0.0]);
        assert_eq!(f.vt.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn rank_deficient_full_svd_is_orthonormal() {
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let f = truncated_svd(&w, 2).unwrap();
        assert_eq!(f.sigma, vec![2.0, 0.0]);
        let utu = f.u.transpose().matmul(&f.u).unwrap();
        assert!(utu.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn wide_matrix() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let f = truncated_svd(&w, 2).unwrap();
        assert_eq!(f.u.shape(), (2, 2));
        assert_eq!(f.vt.shape(), (2, 3));
        assert!(f.reconstruct().sub(&w).unwrap().max_abs() < 1e-13);
        assert!(f.sigma[0] >= f.sigma[1]);
        assert!(f.u.get(0, 0) > 0.0 && f.u.get(0, 1) > 0.0);
    }

    #[test]
    fn rank_out_of_range() {
        let w = Matrix::identity(3);
        assert!(truncated_svd(&w, 0).is_err());
        assert!(truncated_svd(&w, 4).is_err());
    }

    #[test]
    fn closed_gate_disables_branch() {
        let w = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.4);
        let p = Transform::identity(4, TransformKind::Diagonal);
        let mut b = build_branch(&w, &p, 2).unwrap();
        b.gate = vec![0.0, 0.0];
        assert_eq!(b.product(&p).unwrap(), Matrix::zeros(4, 3));
    }

    #[test]
    fn branch_rejects_mismatched_transform() {
        let w = Matrix::identity(3);
        let p = Transform::identity(2, TransformKind::Diagonal);
        assert!(build_branch(&w, &p, 1).is_err());
    }

    #[test]
    fn rank_ratios() {
        assert_eq!(rank_for_ratio(0.02, 62, 64), 1);
        assert_eq!(rank_for_ratio(0.03, 62, 64), 2);
        assert_eq!(rank_for_ratio(0.03, 100, 64), 2);
        assert_eq!(rank_for_ratio(0.02, 1000, 4096), 20);
        assert_eq!(rank_for_ratio(0.5, 3, 3), 2);
        assert_eq!(rank_for_ratio(0.02, 0, 3), 0);
    }
}
