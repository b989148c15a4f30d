//! Small dense linear-algebra routines: Cholesky, LU solves, and symmetric
//! eigenvalues via cyclic Jacobi. Dimensions in this crate stay in the
//! hundreds, so the classic textbook algorithms are plenty.

use crate::tensor::Tensor;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LinalgError {
    NotSquare { rows: usize, cols: usize },
    /// Cholesky hit a non-positive pivot: the matrix is not positive definite.
    NotPositiveDefinite { pivot: usize },
    /// LU hit a zero pivot column: the matrix is singular to working precision.
    Singular { pivot: usize },
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotSquare { rows, cols } => write!(f, "matrix is {rows}x{cols}, expected square"),
            Self::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive definite (pivot {pivot})")
            }
            Self::Singular { pivot } => write!(f, "matrix is singular (pivot {pivot})"),
        }
    }
}

impl std::error::Error for LinalgError {}

/// Symmetrize: (A + Aᵀ)/2.
pub fn symmetrize(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, 0.5 * (a.at(i, j) + a.at(j, i)));
        }
    }
    out
}

/// Cholesky factor L (lower) of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor, LinalgError> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            rows: a.shape().first().copied().unwrap_or(0),
            cols: a.shape().get(1).copied().unwrap_or(0),
        });
    }
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solve A x = b for symmetric positive definite A via Cholesky.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let l = cholesky(a)?;
    let n = a.rows();
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b.data()[i];
        for k in 0..i {
            s -= l.at(i, k) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    // backward: Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.at(k, i) * x[k];
        }
        x[i] = s / l.at(i, i);
    }
    Ok(Tensor::vector(x))
}

/// Solve A x = b by LU with partial pivoting (general square A).
pub fn solve_lu(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(LinalgError::NotSquare {
            rows: a.shape().first().copied().unwrap_or(0),
            cols: a.shape().get(1).copied().unwrap_or(0),
        });
    }
    let n = a.rows();
    let mut m = a.data().to_vec();
    let mut x = b.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        // pivot
        let mut best = col;
        let mut best_abs = m[perm[col] * n + col].abs();
        for r in (col + 1)..n {
            let v = m[perm[r] * n + col].abs();
            if v > best_abs {
                best = r;
                best_abs = v;
            }
        }
        if best_abs == 0.0 || !best_abs.is_finite() {
            return Err(LinalgError::Singular { pivot: col });
        }
        perm.swap(col, best);
        let p = perm[col];
        let pivot = m[p * n + col];
        for r in (col + 1)..n {
            let row = perm[r];
            let factor = m[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            m[row * n + col] = 0.0;
            for c in (col + 1)..n {
                m[row * n + c] -= factor * m[p * n + c];
            }
            x[row] -= factor * x[p];
        }
    }
    // back substitution
    let mut out = vec![0.0; n];
    for i in (0..n).rev() {
        let row = perm[i];
        let mut s = x[row];
        for c in (i + 1)..n {
            s -= m[row * n + c] * out[c];
        }
        out[i] = s / m[row * n + i];
    }
    Ok(Tensor::vector(out))
}

/// Inverse of a square matrix via LU column solves.
pub fn inverse(a: &Tensor) -> Result<Tensor, LinalgError> {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve_lu(a, &Tensor::vector(e))?;
        for i in 0..n {
            out.set(i, j, col.data()[i]);
        }
    }
    Ok(out)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// returned in ascending order.
pub fn sym_eigenvalues(a: &Tensor, sweeps: usize) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.data().to_vec();
    for _ in 0..sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(a: &Tensor) -> f64 {
    sym_eigenvalues(a, 64)[0]
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_max_eigenvalue(a: &Tensor) -> f64 {
    *sym_eigenvalues(a, 64).last().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = Tensor::matrix(2, 2, vec![5.0, 4.0, 4.0, 5.0]).unwrap();
        let b = Tensor::vector(vec![9.0, 9.0]);
        let x = solve_spd(&a, &b).unwrap();
        let back = a.matvec(&x).unwrap();
        for (u, v) in back.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn lu_solves_nonsymmetric() {
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![3.0, 4.0]);
        let x = solve_lu(&a, &b).unwrap();
        assert!((x.data()[0] - 2.0).abs() < 1e-12);
        assert!((x.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_eigenvalues_2x2() {
        // eigenvalues of [[5,4],[4,5]] are 1 and 9
        let a = Tensor::matrix(2, 2, vec![5.0, 4.0, 4.0, 5.0]).unwrap();
        let eig = sym_eigenvalues(&a, 32);
        assert!((eig[0] - 1.0).abs() < 1e-10);
        assert!((eig[1] - 9.0).abs() < 1e-10);
    }

    #[test]
    fn inverse_matches_solve() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let inv = inverse(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        let id = Tensor::eye(2);
        for (u, v) in prod.data().iter().zip(id.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
