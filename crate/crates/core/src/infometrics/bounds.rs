//! Clipping-tail term `tau_P(kappa) = E[(|Y| - kappa)_+]` for a unit-variance
//! variable, the normalized error bound `F(kappa) = kappa / (2M) + tau_P(kappa)`,
//! and the threshold beyond which `F` is increasing.

use std::f64::consts::SQRT_2;

use crate::activations::Family;
use crate::error::{Error, Result};
use crate::quantizer::max_level;

use super::{normal, quadrature};

const CRITICAL_TOL: f64 = 1e-10;

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa >= 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("kappa must be a finite value >= 0, got {kappa}")))
    }
}

fn levels(bits: u32) -> Result<f64> {
    if !(2..=62).contains(&bits) {
        return Err(Error::InvalidSpec(format!("bit-width must be >= 2, got {bits}")));
    }
    Ok(max_level(bits) as f64)
}

pub fn tau_closed_form(family: Family, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(match family {
        Family::Gaussian => 2.0 * (normal::pdf(kappa) - kappa * normal::survival(kappa)),
        Family::Laplace => (-SQRT_2 * kappa).exp() / SQRT_2,
    })
}

/// `F_{P,B}(kappa) = kappa / (2M) + tau_P(kappa)` with `M = 2^(B-1) - 1`.
pub fn bound_f(family: Family, bits: u32, kappa: f64) -> Result<f64> {
    let m = levels(bits)?;
    Ok(kappa / (2.0 * m) + tau_closed_form(family, kappa)?)
}

/// Smallest `kappa` from which `F_{P,B}` is increasing.
///
/// Gaussian: `Phi^{-1}(1 - 1/(4M))`, found by bisection. Laplace: `ln(2M) / sqrt(2)`.
pub fn critical_kappa(family: Family, bits: u32) -> Result<f64> {
    let m = levels(bits)?;
    match family {
        Family::Gaussian => normal::quantile(1.0 - 1.0 / (4.0 * m), CRITICAL_TOL),
        Family::Laplace => Ok((2.0 * m).ln() / SQRT_2),
    }
}

fn unit_density(family: Family, y: f64) -> f64 {
    match family {
        Family::Gaussian => (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        Family::Laplace => (-SQRT_2 * y.abs()).exp() / SQRT_2,
    }
}

/// Quadrature of `2 * int_kappa^inf (y - kappa) f(y) dy` using only the density.
pub fn oracle_tau_numeric(family: Family, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let half = quadrature::integrate_to_infinity(
        |y| (y - kappa) * unit_density(family, y),
        kappa,
        1e-13,
        1e-12,
    )?;
    Ok(2.0 * half.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_tau_reference_points() {
        assert!((tau_closed_form(Family::Gaussian, 0.0).unwrap() - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((tau_closed_form(Family::Gaussian, 1.0).unwrap() - 0.166_630_8).abs() < 1e-6);
        assert!((tau_closed_form(Family::Gaussian, 2.0).unwrap() - 0.016_981_4).abs() < 1e-6);
    }

    #[test]
    fn laplace_tau_reference_point() {
        let expected = (-SQRT_2).exp() / SQRT_2;
        assert!((tau_closed_form(Family::Laplace, 1.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.171_910).abs() < 1e-6);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for family in [Family::Gaussian, Family::Laplace] {
            for k in 0..=20 {
                let kappa = k as f64 * 0.25;
                let a = tau_closed_form(family, kappa).unwrap();
                let b = oracle_tau_numeric(family, kappa).unwrap();
                assert!((a - b).abs() < 1e-9, "{family:?} kappa={kappa}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tail_vanishes_for_large_kappa() {
        for family in [Family::Gaussian, Family::Laplace] {
            assert!(tau_closed_form(family, 10.0).unwrap() < 1e-6);
        }
        assert!(tau_closed_form(Family::Gaussian, 10.0).unwrap() < 1e-12);
        assert!(oracle_tau_numeric(Family::Gaussian, 10.0).unwrap() < 1e-12);
    }

    #[test]
    fn negative_kappa_is_rejected() {
        assert!(tau_closed_form(Family::Gaussian, -0.1).is_err());
        assert!(bound_f(Family::Gaussian, 1, 1.0).is_err());
        assert!(critical_kappa(Family::Laplace, 1).is_err());
    }

    #[test]
    fn four_bit_thresholds() {
        let g = critical_kappa(Family::Gaussian, 4).unwrap();
        let l = critical_kappa(Family::Laplace, 4).unwrap();
        assert!((g - 1.8027).abs() < 1e-4, "{g}");
        assert!((l - 14f64.ln() / SQRT_2).abs() < 1e-15);
        assert!((l - 1.8661).abs() < 1e-4, "{l}");
    }

    #[test]
    fn bound_example() {
        // B = 4, kappa = 2: lambda = 2/7, bound = 1/7 + tau_G(2).
        let f = bound_f(Family::Gaussian, 4, 2.0).unwrap();
        assert!((f - 0.159_839).abs() < 1e-6, "{f}");
    }

    #[test]
    fn bound_derivative_changes_sign_at_threshold() {
        let h = 1e-6;
        for family in [Family::Gaussian, Family::Laplace] {
            for bits in [2, 3, 4, 8] {
                let k = critical_kappa(family, bits).unwrap();
                let d = |x: f64| {
                    (bound_f(family, bits, x + h).unwrap() - bound_f(family, bits, x - h).unwrap())
                        / (2.0 * h)
                };
                assert!(d(k - 0.05) <= 1e-6, "{family:?} B={bits}");
                assert!(d(k + 0.05) >= -1e-6, "{family:?} B={bits}");
            }
        }
    }

    #[test]
    fn bound_increases_past_threshold() {
        for family in [Family::Gaussian, Family::Laplace] {
            for bits in [2, 3, 4, 8] {
                let start = critical_kappa(family, bits).unwrap() + 0.01;
                let grid: Vec<f64> = (0..=100).map(|i| start + (10.0 - start) * i as f64 / 100.0).collect();
                for w in grid.windows(2) {
                    let (a, b) = (bound_f(family, bits, w[0]).unwrap(), bound_f(family, bits, w[1]).unwrap());
                    assert!(b > a, "{family:?} B={bits} at {}", w[0]);
                }
            }
        }
    }
}
