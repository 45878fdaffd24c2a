use nalgebra::DMatrix;

use super::transform::orthogonality_error;
use crate::error::{Error, Result};

const POLAR_TRIGGER: f64 = 1e-10;

/// One Cayley retraction step on the orthogonal group.
///
/// With `A = G R^T - R G^T`, returns `(I + lr/2 A)^{-1} (I - lr/2 A) R`,
/// re-orthonormalized by a polar factor if drift exceeds 1e-10.
pub fn cayley_step(r: &DMatrix<f64>, grad: &DMatrix<f64>, lr: f64) -> Result<DMatrix<f64>> {
    if r.shape() != grad.shape() || r.nrows() != r.ncols() {
        return Err(Error::DimensionMismatch {
            expected: r.nrows(),
            found: grad.nrows(),
        });
    }
    if lr == 0.0 {
        return Ok(r.clone());
    }
    let n = r.nrows();
    let a = grad * r.transpose() - r * grad.transpose();
    let half = 0.5 * lr;
    let lhs = DMatrix::identity(n, n) + &a * half;
    let rhs = (DMatrix::identity(n, n) - &a * half) * r;
    let next = lhs.lu().solve(&rhs).ok_or(Error::StepFailure { lr })?;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::StepFailure { lr });
    }
    if orthogonality_error(&next) > POLAR_TRIGGER {
        return polar(&next).ok_or(Error::StepFailure { lr });
    }
    Ok(next)
}

/// Step size cap `1 / ||G R^T - R G^T||_1` used by Cayley SGD to keep the
/// retraction well inside its radius of accuracy. Infinite for a zero generator.
pub fn step_cap(r: &DMatrix<f64>, grad: &DMatrix<f64>) -> f64 {
    let a = grad * r.transpose() - r * grad.transpose();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if norm == 0.0 {
        f64::INFINITY
    } else {
        1.0 / norm
    }
}

// Nearest orthogonal matrix, U V^T from the SVD.
fn polar(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    Some(svd.u? * svd.v_t?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psot::transform::random_orthogonal;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let r = random_orthogonal(6, 1);
        assert_eq!(cayley_step(&r, &DMatrix::zeros(6, 6), 0.7).unwrap(), r);
    }

    #[test]
    fn step_stays_orthogonal() {
        for seed in 0..10 {
            let r = random_orthogonal(8, seed);
            let g = random_orthogonal(8, seed + 100) * 3.0 + DMatrix::from_element(8, 8, 0.5);
            for lr in [0.1, 1.0, 2.0] {
                let next = cayley_step(&r, &g, lr).unwrap();
                assert!(orthogonality_error(&next) < 1e-10);
            }
        }
    }

    #[test]
    fn polar_factor_repairs_drift() {
        let r = random_orthogonal(5, 2) * 1.001;
        let p = polar(&r).unwrap();
        assert!(orthogonality_error(&p) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = cayley_step(&DMatrix::identity(3, 3), &DMatrix::zeros(2, 2), 1.0);
        assert!(err.is_err());
    }
}
