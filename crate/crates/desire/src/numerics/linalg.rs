//! Dense symmetric positive-definite linear algebra.
//!
//! Everything here routes through the Cholesky factorization: solves use two
//! triangular substitutions and log-determinants come from the factor's
//! diagonal (`log|S| = 2 Σ log L_kk`), which stays finite and accurate where
//! a naive determinant would under/overflow.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Relative tolerance for accepting a matrix as symmetric.
const SYMMETRY_RTOL: f64 = 1e-8;

fn want_square(s: &Tensor, what: &str) -> Result<usize> {
    if !s.is_matrix() || s.shape()[0] != s.shape()[1] {
        return Err(Error::Dimension(format!(
            "{what} must be a square matrix, got shape {:?}",
            s.shape()
        )));
    }
    Ok(s.shape()[0])
}

fn want_symmetric(s: &Tensor, what: &str) -> Result<()> {
    let n = want_square(s, what)?;
    let scale = s.data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let tol = SYMMETRY_RTOL * scale.max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (s.at(i, j) - s.at(j, i)).abs() > tol {
                return Err(Error::Dimension(format!(
                    "{what} is not symmetric at ({i},{j}): {} vs {}",
                    s.at(i, j),
                    s.at(j, i)
                )));
            }
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor L with S = L·Lᵀ.
///
/// Fails with a decomposition error when S is not positive definite; callers
/// that own a covariance estimate are expected to recondition and retry.
pub fn cholesky(s: &Tensor) -> Result<Tensor> {
    want_symmetric(s, "cholesky input")?;
    s.validate_finite("cholesky input")?;
    let n = s.shape()[0];
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = s.at(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(Error::Decomposition(format!(
                        "matrix is not positive definite (pivot {acc:.3e} at row {i})"
                    )));
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Tensor::from_vec(&[n, n], l)
}

/// Solve L·x = b for lower-triangular L.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = want_square(l, "solve_lower factor")?;
    if b.len() != n {
        return Err(Error::Dimension(format!("solve_lower: {n}x{n} factor vs rhs of {}", b.len())));
    }
    let ld = l.data();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut acc = x[i];
        for k in 0..i {
            acc -= ld[i * n + k] * x[k];
        }
        x[i] = acc / ld[i * n + i];
    }
    Ok(x)
}

/// Solve Lᵀ·x = b for lower-triangular L.
pub fn solve_lower_transpose(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = want_square(l, "solve_lower_transpose factor")?;
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "solve_lower_transpose: {n}x{n} factor vs rhs of {}",
            b.len()
        )));
    }
    let ld = l.data();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut acc = x[i];
        for k in (i + 1)..n {
            acc -= ld[k * n + i] * x[k];
        }
        x[i] = acc / ld[i * n + i];
    }
    Ok(x)
}

/// log|S| from an existing Cholesky factor.
pub fn logdet_from_factor(l: &Tensor) -> Result<f64> {
    let n = want_square(l, "logdet factor")?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += l.at(i, i).ln();
    }
    if !acc.is_finite() {
        return Err(Error::Numeric("log-determinant is non-finite".into()));
    }
    Ok(2.0 * acc)
}

/// Solve S·x = y via an existing Cholesky factor of S.
pub fn solve_with_factor(l: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let half = solve_lower(l, y)?;
    solve_lower_transpose(l, &half)
}

/// Solve S·x = y for SPD S and return (x, log|S|) in one factorization.
pub fn spd_solve_and_logdet(s: &Tensor, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = want_square(s, "spd_solve input")?;
    if y.len() != n {
        return Err(Error::Dimension(format!("spd_solve: {n}x{n} matrix vs rhs of {}", y.len())));
    }
    let l = cholesky(s)?;
    let x = solve_with_factor(&l, y)?;
    let logdet = logdet_from_factor(&l)?;
    Ok((x, logdet))
}

/// Dense inverse of an SPD matrix from its Cholesky factor (column solves).
pub fn spd_inverse_from_factor(l: &Tensor) -> Result<Tensor> {
    let n = want_square(l, "spd_inverse factor")?;
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_with_factor(l, &e)?;
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // Symmetrize to scrub round-off drift between mirrored entries.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = avg;
            inv[j * n + i] = avg;
        }
    }
    Tensor::from_vec(&[n, n], inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::{matmul, matmul_nt};

    /// Test-only oracle: Gauss-Jordan inverse with partial pivoting, a path
    /// entirely independent of the Cholesky code under test.
    fn gauss_jordan_inverse(s: &Tensor) -> Tensor {
        let n = s.shape()[0];
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = s.row_slice(i).to_vec();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = a[row][col];
                    for k in 0..2 * n {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        Tensor::from_rows(&a.iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cholesky_frozen_example() {
        let s = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let l = cholesky(&s).unwrap();
        assert_eq!(l.data(), &[2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn cholesky_reconstructs_input() {
        // Random-ish SPD matrix: A·Aᵀ + n·I.
        let a = Tensor::from_rows(&[
            vec![0.5, -1.2, 0.3, 0.9],
            vec![1.1, 0.4, -0.7, 0.2],
            vec![-0.3, 0.8, 1.5, -0.6],
            vec![0.7, -0.1, 0.4, 1.0],
        ])
        .unwrap();
        let mut s = matmul_nt(&a, &a).unwrap();
        for i in 0..4 {
            *s.at_mut(i, i) += 4.0;
        }
        let l = cholesky(&s).unwrap();
        let back = matmul_nt(&l, &l).unwrap();
        let max_abs = s.data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for (x, y) in s.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-8 * max_abs);
        }
        // Strictly lower-triangular part of the factor must be stored as L.
        assert_eq!(l.at(0, 1), 0.0);
        assert_eq!(l.at(0, 3), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(); // eigenvalues 3, −1
        match cholesky(&s) {
            Err(Error::Decomposition(_)) => {}
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric_matrix() {
        let s = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.1, 1.0]]).unwrap();
        assert!(cholesky(&s).is_err());
    }

    #[test]
    fn spd_solve_frozen_example() {
        // S = 2·I₃: solution halves the rhs, log|S| = 3 ln 2 = ln 8.
        let mut s = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            *s.at_mut(i, i) = 2.0;
        }
        let y = [2.0, -4.0, 6.0];
        let (x, logdet) = spd_solve_and_logdet(&s, &y).unwrap();
        for (got, want) in x.iter().zip([1.0, -2.0, 3.0]) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!((logdet - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spd_solve_matches_dense_inverse_oracle() {
        let a = Tensor::from_rows(&[
            vec![1.3, 0.2, -0.5],
            vec![-0.4, 0.9, 0.7],
            vec![0.6, -0.8, 1.1],
        ])
        .unwrap();
        let mut s = matmul_nt(&a, &a).unwrap();
        for i in 0..3 {
            *s.at_mut(i, i) += 1.0;
        }
        let y = [0.3, -1.7, 2.2];
        let (x, _) = spd_solve_and_logdet(&s, &y).unwrap();
        let inv = gauss_jordan_inverse(&s);
        for i in 0..3 {
            let oracle: f64 = (0..3).map(|j| inv.at(i, j) * y[j]).sum();
            assert!((x[i] - oracle).abs() < 1e-10, "{} vs {}", x[i], oracle);
        }
    }

    #[test]
    fn spd_inverse_matches_gauss_jordan_oracle() {
        let a = Tensor::from_rows(&[
            vec![0.9, -0.2, 0.4, 0.1],
            vec![0.3, 1.2, -0.6, 0.5],
            vec![-0.7, 0.1, 0.8, -0.3],
            vec![0.2, 0.6, -0.1, 1.4],
        ])
        .unwrap();
        let mut s = matmul_nt(&a, &a).unwrap();
        for i in 0..4 {
            *s.at_mut(i, i) += 2.0;
        }
        let l = cholesky(&s).unwrap();
        let inv = spd_inverse_from_factor(&l).unwrap();
        let oracle = gauss_jordan_inverse(&s);
        for (x, y) in inv.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        let ident = matmul(&s, &inv).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ident.at(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn logdet_stays_finite_for_tiny_and_large_scales() {
        // det of c·I₄ is c⁴ which would under/overflow f64 for extreme c if
        // computed directly; the factored log-determinant must not.
        for &c in &[1e-160, 1e160] {
            let mut s = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                *s.at_mut(i, i) = c;
            }
            let (_, logdet) = spd_solve_and_logdet(&s, &[1.0; 4]).unwrap();
            assert!((logdet - 4.0 * c.ln()).abs() < 1e-9);
        }
    }
}
