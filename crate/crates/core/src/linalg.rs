//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("shape from matrix")
}

/// A matrix with orthonormal columns (`cols ≤ rows`) or orthonormal rows
/// (`cols > rows`), drawn as the Q factor of a Gaussian matrix with the
/// signs fixed by the diagonal of R so the draw is Haar distributed.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    orthogonal_from(rows, cols, &mut KeyedRng::new(seed, "orthogonal_init"))
}

pub fn orthogonal_from(rows: usize, cols: usize, rng: &mut KeyedRng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::from_row_slice(tall, short, &rng.normals(tall * short));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..short {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let out = from_dmatrix(&q);
    if cols > rows {
        out.transpose()
    } else {
        out
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number; infinite for a singular matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.total_cmp(b));
    e
}

pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::contract("matrix is singular"))
}

/// Least-squares solution of `a·x ≈ b` through the SVD.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .svd(true, true)
        .solve(b, 0.0)
        .map_err(|e| Error::contract(format!("least squares failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_err(t: &Tensor) -> f64 {
        let m = to_dmatrix(t);
        let g = if t.cols() <= t.rows() { m.transpose() * &m } else { &m * m.transpose() };
        let n = g.nrows();
        (g - DMatrix::identity(n, n)).abs().max()
    }

    #[test]
    fn one_by_one_is_plus_or_minus_one() {
        for seed in 0..5 {
            let v = orthogonal_init(1, 1, seed).item();
            assert!((v.abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_tall_and_wide_are_orthonormal() {
        assert!(gram_err(&orthogonal_init(3, 3, 7)) < 1e-10);
        assert!(gram_err(&orthogonal_init(4, 2, 7)) < 1e-10);
        assert!(gram_err(&orthogonal_init(2, 5, 7)) < 1e-10);
        assert_eq!(orthogonal_init(2, 5, 7).shape(), &[2, 5]);
    }

    #[test]
    fn gram_identity_on_shapes_up_to_64() {
        for (i, &(r, c)) in [(64, 64), (64, 1), (1, 64), (17, 33), (40, 9)].iter().enumerate() {
            assert!(gram_err(&orthogonal_init(r, c, i as u64)) < 1e-10, "{r}x{c}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert!(orthogonal_init(5, 5, 3).bits_eq(&orthogonal_init(5, 5, 3)));
        assert!(!orthogonal_init(5, 5, 3).bits_eq(&orthogonal_init(5, 5, 4)));
    }

    #[test]
    fn condition_of_orthogonal_is_one() {
        let m = to_dmatrix(&orthogonal_init(6, 6, 1));
        assert!((condition_number(&m) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = DMatrix::from_row_slice(2, 1, &[2.0, -1.0]);
        let b = &a * &x;
        assert!((lstsq(&a, &b).unwrap() - x).abs().max() < 1e-12);
    }
}
