use crate::error::{GrailError, Result};
use crate::tensor::Tensor;

/// A symmetric system `a · X = rhs` solved by Cholesky factorization.
#[derive(Debug, Clone)]
pub struct SpdSystem {
    a: Tensor,
    rhs: Tensor,
}

impl SpdSystem {
    /// Checks that `a` is square and symmetric within `1e-9·max|a|` and that
    /// `rhs` has matching row count.
    pub fn new(a: Tensor, rhs: Tensor) -> Result<Self> {
        a.expect_rank(2, "spd system")?;
        rhs.expect_rank(2, "spd system rhs")?;
        let n = a.rows();
        if a.cols() != n || rhs.rows() != n {
            return Err(GrailError::shape("spd_solve", a.shape(), rhs.shape()));
        }
        let tol = 1e-9 * a.max_abs();
        for i in 0..n {
            for j in (i + 1)..n {
                if (a.at(i, j) - a.at(j, i)).abs() > tol {
                    return Err(GrailError::InvalidArgument(format!(
                        "system matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { a, rhs })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn rhs(&self) -> &Tensor {
        &self.rhs
    }
}

/// Lower-triangular `L` with `L·Lᵀ = a + ridge·I`. Reads only the lower triangle.
pub fn cholesky(a: &Tensor, ridge: f64) -> Result<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    let ld = l.data_mut();
    for j in 0..n {
        let mut d = a.at(j, j) + ridge;
        for p in 0..j {
            d -= ld[j * n + p] * ld[j * n + p];
        }
        // A zero or negative pivot (including NaN) means the shifted matrix is not PD.
        if !(d > 0.0) || !d.is_finite() {
            return Err(GrailError::Singular {
                ridge,
                pivot: j,
                value: d,
            });
        }
        let djj = d.sqrt();
        ld[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for p in 0..j {
                s -= ld[i * n + p] * ld[j * n + p];
            }
            ld[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `(a + ridge·I) · X = rhs`.
pub fn spd_solve(sys: &SpdSystem, ridge: f64) -> Result<Tensor> {
    if !(ridge >= 0.0) {
        return Err(GrailError::InvalidArgument(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    let l = cholesky(&sys.a, ridge)?;
    let n = l.rows();
    let m = sys.rhs.cols();
    let ld = l.data();
    let mut x = sys.rhs.clone();
    let xd = x.data_mut();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = xd[i * m + c];
            for p in 0..i {
                s -= ld[i * n + p] * xd[p * m + c];
            }
            xd[i * m + c] = s / ld[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = xd[i * m + c];
            for p in (i + 1)..n {
                s -= ld[p * n + i] * xd[p * m + c];
            }
            xd[i * m + c] = s / ld[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use crate::testutil::random_matrix;

    /// Gauss-Jordan inverse with partial pivoting, independent of the Cholesky path.
    fn gauss_jordan_inverse(a: &Tensor) -> Tensor {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r: Vec<f64> = (0..n).map(|j| a.at(i, j)).collect();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    for (v, pv) in aug[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        Tensor::from_fn2(n, n, |i, j| aug[i][n + j])
    }

    fn sys(a: Tensor, rhs: Tensor) -> SpdSystem {
        SpdSystem::new(a, rhs).unwrap()
    }

    #[test]
    fn identity_system() {
        let s = sys(Tensor::eye(2), Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
        assert_eq!(spd_solve(&s, 0.0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn diagonal_with_ridge() {
        let a = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = sys(a, Tensor::from_rows(&[vec![3.0], vec![6.0]]).unwrap());
        let x = spd_solve(&s, 1.0).unwrap();
        // factor is sqrt(3), so allow one ulp-level deviation
        assert!((x.data()[0] - 1.0).abs() < 1e-15 && (x.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_explicit_inverse() {
        let r = random_matrix(6, 6, 11);
        let mut a = matmul(&r.transpose(), &r).unwrap();
        for i in 0..6 {
            a.set(i, i, a.at(i, i) + 1.0);
        }
        let rhs = random_matrix(6, 2, 12);
        let x = spd_solve(&sys(a.clone(), rhs.clone()), 0.1).unwrap();
        let mut shifted = a.clone();
        for i in 0..6 {
            shifted.set(i, i, shifted.at(i, i) + 0.1);
        }
        let oracle = matmul(&gauss_jordan_inverse(&shifted), &rhs).unwrap();
        assert!(x.rel_diff(&oracle) <= 1e-9);
        let resid = matmul(&shifted, &x).unwrap().sub(&rhs).unwrap().frobenius();
        assert!(resid <= 1e-8 * rhs.frobenius());
    }

    #[test]
    fn singular_without_ridge_reports_pivot() {
        let a = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let s = sys(a, Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let err = spd_solve(&s, 0.0).unwrap_err();
        assert!(matches!(err, GrailError::Singular { pivot: 1, .. }), "{err}");
        assert!(err.to_string().contains("increase the ridge"));
        assert!(spd_solve(&s, 1e-3).is_ok());
    }

    #[test]
    fn rejects_asymmetric_and_negative_ridge() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(SpdSystem::new(a, Tensor::zeros(&[2, 1])).is_err());
        let s = sys(Tensor::eye(2), Tensor::zeros(&[2, 1]));
        assert!(spd_solve(&s, -1.0).is_err());
    }
}
