//! Peak-suppression loss `|| softmax(|y| / T) * y ||_2` with `y = P (x R)`,
//! where `P = I - 11^T / d` removes the coordinate mean, and its gradient.

use nalgebra::DMatrix;

use super::transform::OrthoTransform;
use crate::error::{Error, Result};

pub fn centering_project(y: &[f64]) -> Vec<f64> {
    if y.is_empty() {
        return Vec::new();
    }
    let mu = crate::numeric::mean(y);
    y.iter().map(|v| v - mu).collect()
}

fn softmax_abs(y: &[f64], temperature: f64) -> Vec<f64> {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let e: Vec<f64> = y.iter().map(|v| ((v.abs() - peak) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("temperature must be positive, got {t}")))
    }
}

/// Loss of an already rotated token `u = x R`, and its gradient with respect to `u`.
pub(crate) fn loss_and_grad_rotated(u: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let y = centering_project(u);
    let w = softmax_abs(&y, temperature);
    let v: Vec<f64> = w.iter().zip(&y).map(|(a, b)| a * b).collect();
    let loss = crate::numeric::l2_norm(&v);
    if loss == 0.0 {
        return (0.0, vec![0.0; u.len()]);
    }
    // dL/dv = v / L, pushed back through v = w * y and w = softmax(|y| / T).
    let g: Vec<f64> = v.iter().map(|x| x / loss).collect();
    let weighted: f64 = g.iter().zip(&y).zip(&w).map(|((g, y), w)| g * y * w).sum();
    let grad_y: Vec<f64> = (0..y.len())
        .map(|k| {
            // Subgradient 0 for |y_k| at y_k = 0.
            let sign = if y[k] > 0.0 {
                1.0
            } else if y[k] < 0.0 {
                -1.0
            } else {
                0.0
            };
            g[k] * w[k] + sign / temperature * w[k] * (g[k] * y[k] - weighted)
        })
        .collect();
    (loss, centering_project(&grad_y))
}

pub fn loss_ps(x: &[f64], r: &OrthoTransform, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    let u = r.apply(x)?;
    let y = centering_project(&u);
    let w = softmax_abs(&y, temperature);
    Ok(crate::numeric::l2_norm(
        &w.iter().zip(&y).map(|(a, b)| a * b).collect::<Vec<_>>(),
    ))
}

/// Euclidean gradient of `loss_ps` with respect to each diagonal block of `R`.
pub fn grad_loss(x: &[f64], r: &OrthoTransform, temperature: f64) -> Result<Vec<DMatrix<f64>>> {
    check_temperature(temperature)?;
    let u = r.apply(x)?;
    let (_, gu) = loss_and_grad_rotated(&u, temperature);
    Ok(r
        .blocks()
        .iter()
        .zip(r.offsets())
        .map(|(m, &o)| {
            let n = m.nrows();
            DMatrix::from_fn(n, n, |i, j| x[o + i] * gu[o + j])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psot::transform::random_orthogonal;

    #[test]
    fn projector_cases() {
        assert_eq!(centering_project(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(centering_project(&[2.0, 0.0]), vec![1.0, -1.0]);
        let y = [0.3, -1.2, 4.0, 0.0, 2.2];
        let once = centering_project(&y);
        let twice = centering_project(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_hand_case() {
        let r = OrthoTransform::identity(2, 1).unwrap();
        let l = loss_ps(&[2.0, 0.0], &r, 1.0).unwrap();
        assert!((l - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_token_has_zero_loss_and_gradient() {
        let r = OrthoTransform::identity(4, 1).unwrap();
        assert_eq!(loss_ps(&[3.0; 4], &r, 2.0).unwrap(), 0.0);
        let g = grad_loss(&[3.0; 4], &r, 2.0).unwrap();
        assert!(g[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn high_temperature_limit() {
        let r = OrthoTransform::identity(4, 1).unwrap();
        let x = [3.0, -1.0, 0.5, 2.0];
        let y = centering_project(&x);
        let expected = crate::numeric::l2_norm(&y) / 4.0;
        assert!((loss_ps(&x, &r, 1e6).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn gradient_ignores_constant_shift_in_rotated_space() {
        // Centering kills constants after rotation, so shifting u by a constant
        // leaves the rotated-space gradient unchanged.
        let u = [0.4, -2.0, 1.1, 0.3];
        let shifted: Vec<f64> = u.iter().map(|v| v + 5.0).collect();
        let (l1, g1) = loss_and_grad_rotated(&u, 2.0);
        let (l2, g2) = loss_and_grad_rotated(&shifted, 2.0);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..5u64 {
            let m = random_orthogonal(8, seed);
            let r = OrthoTransform::from_blocks(vec![m.clone()]).unwrap();
            let x: Vec<f64> = (0..8).map(|i| ((i as u64 * 7 + seed * 3) % 11) as f64 - 5.0).collect();
            let g = &grad_loss(&x, &r, 2.0).unwrap()[0];
            let mut fd = DMatrix::zeros(8, 8);
            for i in 0..8 {
                for j in 0..8 {
                    let mut plus = m.clone();
                    plus[(i, j)] += h;
                    let mut minus = m.clone();
                    minus[(i, j)] -= h;
                    let lp = loss_ps(&x, &OrthoTransform::from_blocks_unchecked(vec![plus]), 2.0).unwrap();
                    let lm = loss_ps(&x, &OrthoTransform::from_blocks_unchecked(vec![minus]), 2.0).unwrap();
                    fd[(i, j)] = (lp - lm) / (2.0 * h);
                }
            }
            let rel = (g - &fd).norm() / g.norm();
            assert!(rel < 1e-4, "seed {seed}: {rel}");
        }
    }
}
