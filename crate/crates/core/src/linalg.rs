//! Small dense helpers built around a hand-rolled Cholesky factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{CfaError, Result};

/// Lower-triangular `L` with `L * L^T = m`.
///
/// Only the lower triangle of `m` is read. A failing leading minor is
/// reported 1-based.
pub fn cholesky_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    if m.ncols() != p {
        return Err(CfaError::DimensionMismatch(format!(
            "cholesky of {}x{} matrix",
            p,
            m.ncols()
        )));
    }
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(CfaError::NotPositiveDefinite { minor: j + 1 });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..p {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// `ln |m|` from a Cholesky factor.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of an SPD matrix given its Cholesky factor.
pub fn inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let p = l.nrows();
    let eye = DMatrix::<f64>::identity(p, p);
    let y = l
        .solve_lower_triangular(&eye)
        .expect("factor has positive diagonal");
    let inv = y.transpose() * y;
    symmetrize(&inv)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub(crate) fn mat_vec_mul(l: &DMatrix<f64>, z: &[f64]) -> DVector<f64> {
    l * DVector::from_column_slice(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_factors_to_identity() {
        let l = cholesky_factor(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(l, DMatrix::identity(4, 4));
    }

    #[test]
    fn two_by_two_hand_case() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.49, 0.49, 1.0]);
        let l = cholesky_factor(&m).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 0)], 0.49, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 1)], (1.0f64 - 0.49 * 0.49).sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn indefinite_reports_minor() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            cholesky_factor(&m),
            Err(CfaError::NotPositiveDefinite { minor: 2 })
        );
    }

    #[test]
    fn inverse_and_log_det() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = cholesky_factor(&m).unwrap();
        assert_abs_diff_eq!(log_det_from_factor(&l), (1.75f64).ln(), epsilon = 1e-14);
        let prod = &m * inverse_from_factor(&l);
        assert!((prod - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    proptest! {
        #[test]
        fn factor_round_trips(
            p in 1usize..6,
            raw in proptest::collection::vec(-2.0f64..2.0, 36),
            diag in proptest::collection::vec(0.2f64..3.0, 6),
        ) {
            let mut l = DMatrix::<f64>::zeros(p, p);
            for i in 0..p {
                for j in 0..i {
                    l[(i, j)] = raw[i * 6 + j];
                }
                l[(i, i)] = diag[i];
            }
            let m = &l * l.transpose();
            let back = cholesky_factor(&m).unwrap();
            prop_assert!((back - &l).abs().max() < 1e-8);
        }
    }
}
