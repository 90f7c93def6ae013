//! Dense factorizations and triangular solves.

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with the offending pivot index when a non-positive pivot shows up,
/// which is how callers detect loss of definiteness.
pub fn cholesky_spd(a: &Matrix) -> Result<Matrix> {
    debug_assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    let mut factor = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= factor.get(i, k) * factor.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i,
                        value: sum,
                    });
                }
                factor.set(i, i, sum.sqrt());
            } else {
                factor.set(i, j, sum / factor.get(j, j));
            }
        }
    }
    Ok(factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

/// Solves `F x = b` for triangular `F`.
pub fn solve_triangular(factor: &Matrix, b: &[f64], side: Side) -> Result<Vec<f64>> {
    debug_assert_eq!(factor.rows(), factor.cols());
    let n = factor.rows();
    debug_assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    match side {
        Side::Lower => {
            for i in 0..n {
                let diag = factor.get(i, i);
                if diag == 0.0 {
                    return Err(Error::SingularTriangular { index: i });
                }
                let head = dot(&factor.row_slice(i)[..i], &x[..i]);
                x[i] = (x[i] - head) / diag;
            }
        }
        Side::Upper => {
            for i in (0..n).rev() {
                let diag = factor.get(i, i);
                if diag == 0.0 {
                    return Err(Error::SingularTriangular { index: i });
                }
                let tail = dot(&factor.row_slice(i)[i + 1..], &x[i + 1..]);
                x[i] = (x[i] - tail) / diag;
            }
        }
    }
    Ok(x)
}

/// Solves `A x = b` given the lower Cholesky factor of `A`.
pub fn cholesky_solve(factor: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let z = solve_triangular(factor, b, Side::Lower)?;
    // Back-substitute against F^T without materializing it.
    let n = factor.rows();
    let mut x = z;
    for i in (0..n).rev() {
        let diag = factor.get(i, i);
        if diag == 0.0 {
            return Err(Error::SingularTriangular { index: i });
        }
        let mut sum = x[i];
        for k in i + 1..n {
            sum -= factor.get(k, i) * x[k];
        }
        x[i] = sum / diag;
    }
    Ok(x)
}

/// Solves a general square system by LU with partial pivoting.
///
/// Used for the linearized KKT system in the QP backward pass, which is
/// square but not symmetric.
pub fn lu_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    debug_assert_eq!(a.rows(), a.cols());
    let n = a.rows();
    debug_assert_eq!(b.len(), n);
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu.get(col, col).abs();
        for r in col + 1..n {
            let v = lu.get(r, col).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val < 1e-300 || !pivot_val.is_finite() {
            return Err(Error::SingularSystem { step: col });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu.get(col, j);
                lu.set(col, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            perm.swap(col, pivot_row);
            x.swap(col, pivot_row);
        }
        let inv_pivot = 1.0 / lu.get(col, col);
        for r in col + 1..n {
            let factor = lu.get(r, col) * inv_pivot;
            if factor == 0.0 {
                continue;
            }
            lu.set(r, col, factor);
            for j in col + 1..n {
                let v = lu.get(r, j) - factor * lu.get(col, j);
                lu.set(r, j, v);
            }
            x[r] -= factor * x[col];
        }
    }

    for i in (0..n).rev() {
        let tail = dot(&lu.row_slice(i)[i + 1..], &x[i + 1..]);
        x[i] = (x[i] - tail) / lu.get(i, i);
    }
    Ok(x)
}
