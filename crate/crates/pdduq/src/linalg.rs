//! Small dense symmetric eigensolver shared by the Gauss-rule construction and
//! the built-in eigenvalue models.

/// Eigendecomposition of a dense symmetric matrix by cyclic Jacobi rotations.
///
/// `a` is row-major `n x n` and is consumed as scratch. Returns eigenvalues in
/// ascending order and the matching orthonormal eigenvectors as columns of `v`
/// (row-major). Off-diagonal norm is reduced below `1e-14 * ||A||_F`.
pub(crate) fn jacobi_eigen_sym(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>), String> {
    assert_eq!(a.len(), n * n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    let tol = 1e-14 * norm;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap());
            let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
            let mut vectors = vec![0.0; n * n];
            for (new_col, &old_col) in order.iter().enumerate() {
                for r in 0..n {
                    vectors[r * n + new_col] = v[r * n + old_col];
                }
            }
            return Ok((eigenvalues, vectors));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // tangent of the rotation angle, smaller root for stability
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err("Jacobi eigensolver did not converge".to_string())
}

/// Eigen-decomposition of a symmetric tridiagonal matrix given its diagonal and
/// off-diagonal. Used for Jacobi matrices of orthogonal-polynomial recurrences.
pub(crate) fn tridiag_eigen(diag: &[f64], offdiag: &[f64]) -> Result<(Vec<f64>, Vec<f64>), String> {
    let n = diag.len();
    assert_eq!(offdiag.len() + 1, n.max(1));
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = diag[i];
        if i + 1 < n {
            a[i * n + i + 1] = offdiag[i];
            a[(i + 1) * n + i] = offdiag[i];
        }
    }
    jacobi_eigen_sym(a, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_and_diagonal() {
        let (l, _) = jacobi_eigen_sym(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(l, vec![1.0, 1.0, 1.0]);
        let (l, v) = jacobi_eigen_sym(vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], 3).unwrap();
        assert_eq!(l, vec![1.0, 2.0, 3.0]);
        // eigenvector for eigenvalue 1 is e_2
        assert_abs_diff_eq!(v[1 * 3 + 0].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_and_invariants_random_symmetric() {
        // fixed pseudo-random symmetric matrices
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for n in [2usize, 3, 5, 8] {
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let x = next();
                    a[i * n + j] = x;
                    a[j * n + i] = x;
                }
            }
            let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
            let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (l, v) = jacobi_eigen_sym(a.clone(), n).unwrap();
            assert_abs_diff_eq!(l.iter().sum::<f64>(), trace, epsilon = 1e-10 * norm.max(1.0));
            for k in 0..n {
                // residual ||A v_k - l_k v_k||
                let mut res = 0.0;
                for r in 0..n {
                    let mut av = 0.0;
                    for c in 0..n {
                        av += a[r * n + c] * v[c * n + k];
                    }
                    res += (av - l[k] * v[r * n + k]).powi(2);
                }
                assert!(res.sqrt() <= 1e-10 * norm.max(1.0), "residual too large: {res}");
            }
            for k in 1..n {
                assert!(l[k] >= l[k - 1]);
            }
        }
    }
}
