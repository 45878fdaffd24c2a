//! Cell masses and the expected absolute error of the centered clamped quantizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::{sum, CompensatedSum};
use crate::quantizer::{centered_clamp_unchecked, centered_level, levels_for};

use super::dist::DistFamily;
use super::quadrature;

const QUAD_ABS_TOL: f64 = 1e-14;
const QUAD_REL_TOL: f64 = 1e-12;
const MC_MIN_DRAWS: usize = 100_000;

/// Probability of each cell `I_i`, indexed `i + M` for `i` in `[-M, M]`.
///
/// Interior cells are `[(i - 1/2)s, (i + 1/2)s)`; the two boundary cells absorb
/// the clipped tails.
pub fn cell_masses(dist: &DistFamily, step: f64, clip: f64) -> Result<Vec<f64>> {
    let m = levels_for(step, clip)?;
    let n_cells = (2 * m + 1) as usize;
    if let DistFamily::Empirical(e) = dist {
        let mut counts = vec![0usize; n_cells];
        for &x in e.samples() {
            counts[(centered_level(x, step, m) + m) as usize] += 1;
        }
        let n = e.samples().len() as f64;
        return Ok(counts.into_iter().map(|c| c as f64 / n).collect());
    }

    let surv = |x: f64| dist.survival(x).expect("analytic family");
    let mut masses = vec![0.0; n_cells];
    // Symmetric families: fill i >= 0 from upper-tail differences and mirror.
    masses[m as usize] = 1.0 - 2.0 * surv(0.5 * step);
    for i in 1..m {
        let lo = (i as f64 - 0.5) * step;
        let hi = (i as f64 + 0.5) * step;
        let p = surv(lo) - surv(hi);
        masses[(m + i) as usize] = p;
        masses[(m - i) as usize] = p;
    }
    let tail = surv(clip - 0.5 * step);
    masses[n_cells - 1] = tail;
    masses[0] = tail;
    Ok(masses)
}

/// Shannon entropy of a probability vector, in nats.
pub fn mass_entropy(masses: &[f64]) -> f64 {
    -sum(masses.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()))
}

/// `E|X - Q_{s,c}(X)|`, by per-cell adaptive quadrature for analytic families and
/// an exact average for samples.
pub fn expected_clip_error(dist: &DistFamily, step: f64, clip: f64) -> Result<f64> {
    let m = levels_for(step, clip)?;
    if let DistFamily::Empirical(e) = dist {
        let n = e.samples().len() as f64;
        return Ok(sum(e
            .samples()
            .iter()
            .map(|&x| (x - centered_clamp_unchecked(x, step, clip)).abs()))
            / n);
    }

    let pdf = |x: f64| dist.pdf(x).expect("analytic family");
    let mut half = CompensatedSum::new();
    // Cell 0, positive half.
    half.add(quadrature::integrate(|x| x * pdf(x), 0.0, 0.5 * step, QUAD_ABS_TOL, QUAD_REL_TOL)?.value);
    for i in 1..m {
        let q = i as f64 * step;
        let lo = q - 0.5 * step;
        let hi = q + 0.5 * step;
        half.add(quadrature::integrate(|x| (q - x) * pdf(x), lo, q, QUAD_ABS_TOL, QUAD_REL_TOL)?.value);
        half.add(quadrature::integrate(|x| (x - q) * pdf(x), q, hi, QUAD_ABS_TOL, QUAD_REL_TOL)?.value);
    }
    // Boundary cell [c - s/2, inf) with centroid c.
    half.add(quadrature::integrate(|x| (clip - x) * pdf(x), clip - 0.5 * step, clip, QUAD_ABS_TOL, QUAD_REL_TOL)?.value);
    half.add(quadrature::integrate_to_infinity(|x| (x - clip) * pdf(x), clip, QUAD_ABS_TOL, QUAD_REL_TOL)?.value);
    Ok(2.0 * half.value())
}

/// `E|X - Q_{s,c}(X)| / sigma`.
pub fn normalized_clip_error(dist: &DistFamily, step: f64, clip: f64) -> Result<f64> {
    Ok(expected_clip_error(dist, step, clip)? / dist.sigma())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Monte Carlo estimate of `E|X - Q_{s,c}(X)|` with its standard error.
pub fn oracle_mc_clip_error(
    dist: &DistFamily,
    step: f64,
    clip: f64,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    levels_for(step, clip)?;
    if draws < MC_MIN_DRAWS {
        return Err(Error::InvalidSpec(format!(
            "Monte Carlo oracle needs at least {MC_MIN_DRAWS} draws, got {draws}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 {
        match dist {
            DistFamily::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            DistFamily::Laplace { sigma } => {
                let b = sigma / std::f64::consts::SQRT_2;
                let u: f64 = rng.random::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            DistFamily::Empirical(e) => e.samples()[rng.random_range(0..e.samples().len())],
        }
    };
    let mut s1 = CompensatedSum::new();
    let mut s2 = CompensatedSum::new();
    for _ in 0..draws {
        let x = draw();
        let err = (x - centered_clamp_unchecked(x, step, clip)).abs();
        s1.add(err);
        s2.add(err * err);
    }
    let n = draws as f64;
    let mean = s1.value() / n;
    let var = (s2.value() / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Family;
    use crate::infometrics::bounds::tau_closed_form;

    #[test]
    fn central_gaussian_cell() {
        let p = cell_masses(&DistFamily::gaussian(1.0).unwrap(), 1.0, 3.0).unwrap();
        assert_eq!(p.len(), 7);
        // Phi(0.5) - Phi(-0.5) by quadrature of the density.
        let oracle = crate::infometrics::quadrature::integrate(
            |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -0.5,
            0.5,
            1e-15,
            0.0,
        )
        .unwrap()
        .value;
        assert!((p[3] - oracle).abs() < 1e-12);
        assert!((p[3] - 0.38292).abs() < 1e-5);
    }

    #[test]
    fn masses_sum_to_one_and_are_symmetric() {
        for dist in [DistFamily::gaussian(1.3).unwrap(), DistFamily::laplace(0.7).unwrap()] {
            for (s, c) in [(0.5, 3.5), (0.2, 0.2), (1.0 / 7.0, 1.0)] {
                let p = cell_masses(&dist, s, c).unwrap();
                assert!((sum(p.iter().copied()) - 1.0).abs() < 1e-12);
                for i in 0..p.len() {
                    assert_eq!(p[i], p[p.len() - 1 - i]);
                }
            }
        }
    }

    #[test]
    fn point_mass_in_center_cell() {
        let d = DistFamily::empirical(vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let p = cell_masses(&d, 1.0, 3.0).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(mass_entropy(&p), 0.0);
    }

    #[test]
    fn rejects_non_integer_level_count() {
        assert!(cell_masses(&DistFamily::gaussian(1.0).unwrap(), 1.0, 0.5).is_err());
    }

    #[test]
    fn uniform_cell_error_is_quarter_step() {
        // Midpoints of a fine grid over [-s/2, s/2) stand in for the uniform law.
        let s = 0.8;
        let n = 200_000;
        let samples: Vec<f64> = (0..n).map(|k| -s / 2.0 + s * (k as f64 + 0.5) / n as f64).collect();
        let d = DistFamily::empirical(samples).unwrap();
        let e = expected_clip_error(&d, s, 3.0 * s).unwrap();
        assert!((e - s / 4.0).abs() < 1e-9);
    }

    #[test]
    fn four_bit_gaussian_error_below_bound() {
        let s = 2.0 / 7.0;
        let d = DistFamily::gaussian(1.0).unwrap();
        let e = normalized_clip_error(&d, s, 2.0).unwrap();
        let bound = s / 2.0 + tau_closed_form(Family::Gaussian, 2.0).unwrap();
        assert!((bound - 0.159_839).abs() < 1e-6);
        assert!(e <= bound, "{e} > {bound}");
    }

    #[test]
    fn normalized_error_is_scale_invariant() {
        for t in [0.01, 3.0, 250.0] {
            let base = normalized_clip_error(&DistFamily::laplace(1.0).unwrap(), 0.25, 1.75).unwrap();
            let scaled = normalized_clip_error(&DistFamily::laplace(t).unwrap(), 0.25 * t, 1.75 * t).unwrap();
            assert!((base - scaled).abs() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let d = DistFamily::gaussian(1.0).unwrap();
        let (s, c) = (0.5, 2.5);
        let q = expected_clip_error(&d, s, c).unwrap();
        let mc = oracle_mc_clip_error(&d, s, c, 200_000, 5).unwrap();
        assert!((mc.mean - q).abs() < 3.0 * mc.std_err, "{} vs {q} (se {})", mc.mean, mc.std_err);
        assert!(oracle_mc_clip_error(&d, s, c, 10, 5).is_err());
    }
}
