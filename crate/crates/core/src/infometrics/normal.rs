//! Standard normal density, distribution and quantile.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;

use crate::error::{Error, Result};

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - Phi(x)`, accurate for large `x`.
pub fn survival(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Solves `Phi(x) = p` by bisection on a bracket, to absolute tolerance `tol` in `x`.
pub fn quantile(p: f64, tol: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidSpec(format!("quantile probability must lie in (0, 1), got {p}")));
    }
    // Work on whichever tail keeps the target well away from 1.
    let (target, upper) = if p > 0.5 { (1.0 - p, true) } else { (p, false) };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while survival(hi) > target {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Numeric(format!("quantile bracket failed for p = {p}")));
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    Ok(if upper { x } else { -x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((survival(5.0) - 2.866_515_718_791_939e-7).abs() < 1e-20);
        assert!((pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[0.01, 0.25, 0.5, 0.75, 0.964_285_714_285_714_3, 0.999] {
            let x = quantile(p, 1e-12).unwrap();
            assert!((cdf(x) - p).abs() < 1e-11, "p = {p}");
        }
        assert!((quantile(0.75, 1e-12).unwrap() - 0.674_489_750_196_081_7).abs() < 1e-10);
        assert!(quantile(1.0, 1e-10).is_err());
    }
}
