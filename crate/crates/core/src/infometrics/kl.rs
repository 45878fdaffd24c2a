//! Smoothed KL divergence between an activation density and its quantized
//! version with each centroid spread by a Laplace kernel of width `theta`.
//!
//! Two routes: a direct histogram estimate, and the decomposition
//! `-H(P) + H({p_i}) + ln(2 theta) + E_clip / theta` valid for `theta << s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{population_std, CompensatedSum};
use crate::quantizer::{centered_level, levels_for};

use super::clip::{cell_masses, expected_clip_error, mass_entropy};
use super::dist::DistFamily;

pub const DEFAULT_BINS: usize = 15_000;
pub const DEFAULT_SUPPORT_SIGMAS: f64 = 8.0;
pub const DENSITY_FLOOR: f64 = 1e-12;
const MIN_DIRECT_SAMPLES: usize = 1_000;
const MAX_THETA_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedKlConfig {
    /// Absolute Laplace kernel width.
    pub theta: f64,
    pub bins: usize,
    /// Histogram support half-width, in units of the sample standard deviation.
    pub support_sigmas: f64,
}

impl SmoothedKlConfig {
    pub fn with_theta(theta: f64) -> Self {
        Self {
            theta,
            bins: DEFAULT_BINS,
            support_sigmas: DEFAULT_SUPPORT_SIGMAS,
        }
    }

    /// Kernel width as a fraction of the step size.
    pub fn for_step(step: f64, theta_ratio: f64) -> Self {
        Self::with_theta(step * theta_ratio)
    }

    fn check(&self, step: f64) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= MAX_THETA_RATIO * step) {
            return Err(Error::Separation {
                theta: self.theta,
                step,
            });
        }
        if self.bins == 0 || !(self.support_sigmas > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "histogram needs bins > 0 and support > 0 (bins = {}, support = {})",
                self.bins, self.support_sigmas
            )));
        }
        Ok(())
    }
}

/// The four terms of the decomposition and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlDecomposition {
    pub h_p: f64,
    pub h_masses: f64,
    pub log_two_theta: f64,
    pub e_clip: f64,
    pub theta: f64,
    pub value: f64,
}

impl KlDecomposition {
    pub fn from_terms(h_p: f64, h_masses: f64, e_clip: f64, theta: f64) -> Self {
        let log_two_theta = (2.0 * theta).ln();
        Self {
            h_p,
            h_masses,
            log_two_theta,
            e_clip,
            theta,
            value: -h_p + h_masses + log_two_theta + e_clip / theta,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Grid {
    fn new(sigma: f64, cfg: &SmoothedKlConfig) -> Self {
        let half = cfg.support_sigmas * sigma;
        Self {
            lo: -half,
            width: 2.0 * half / cfg.bins as f64,
            bins: cfg.bins,
        }
    }

    fn edge(&self, b: usize) -> f64 {
        self.lo + b as f64 * self.width
    }

    fn counts(&self, samples: &[f64]) -> (Vec<u64>, u64) {
        let mut counts = vec![0u64; self.bins];
        let mut inside = 0;
        for &x in samples {
            let pos = (x - self.lo) / self.width;
            if pos >= 0.0 && pos < self.bins as f64 {
                counts[pos as usize] += 1;
                inside += 1;
            }
        }
        (counts, inside)
    }
}

/// Histogram plug-in differential entropy on the direct estimator's grid.
pub fn histogram_entropy(samples: &[f64], cfg: &SmoothedKlConfig) -> Result<f64> {
    let sigma = population_std(samples);
    let grid = Grid::new(sigma, cfg);
    let (counts, inside) = grid.counts(samples);
    if inside == 0 {
        return Err(Error::Numeric("no samples fall inside the histogram support".into()));
    }
    let n = samples.len() as f64;
    let mut acc = CompensatedSum::new();
    for &c in counts.iter().filter(|&&c| c > 0) {
        let p = c as f64 / n;
        acc.add(-p * (p / grid.width).ln());
    }
    Ok(acc.value())
}

pub fn smoothed_kl_decomposed(
    dist: &DistFamily,
    step: f64,
    clip: f64,
    cfg: &SmoothedKlConfig,
) -> Result<KlDecomposition> {
    levels_for(step, clip)?;
    cfg.check(step)?;
    let h_p = match dist {
        DistFamily::Empirical(e) => histogram_entropy(e.samples(), cfg)?,
        analytic => analytic.differential_entropy().expect("analytic family"),
    };
    let h_masses = mass_entropy(&cell_masses(dist, step, clip)?);
    let e_clip = expected_clip_error(dist, step, clip)?;
    Ok(KlDecomposition::from_terms(h_p, h_masses, e_clip, cfg.theta))
}

// Mass of the Laplace(q, theta) law on [a, b).
fn kernel_mass(a: f64, b: f64, q: f64, theta: f64) -> f64 {
    let (u, v) = ((a - q) / theta, (b - q) / theta);
    if u >= 0.0 {
        0.5 * (-u).exp() * -(-(v - u)).exp_m1()
    } else if v <= 0.0 {
        0.5 * v.exp() * -(-(v - u)).exp_m1()
    } else {
        1.0 - 0.5 * (-v).exp() - 0.5 * u.exp()
    }
}

/// Histogram KL between raw samples and their Laplace-smoothed quantized version,
/// on shared bin edges over `+-support_sigmas * sigma`, with both densities floored.
pub fn smoothed_kl_direct(samples: &[f64], step: f64, clip: f64, cfg: &SmoothedKlConfig) -> Result<f64> {
    let m = levels_for(step, clip)?;
    cfg.check(step)?;
    if samples.len() < MIN_DIRECT_SAMPLES {
        return Err(Error::InvalidSpec(format!(
            "direct KL needs at least {MIN_DIRECT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    let sigma = population_std(samples);
    if !(sigma > 0.0) {
        return Err(Error::Numeric("samples have zero spread".into()));
    }
    let grid = Grid::new(sigma, cfg);
    let (counts, inside) = grid.counts(samples);
    if inside == 0 {
        return Err(Error::Numeric("histogram support is empty".into()));
    }

    let n = samples.len() as f64;
    let mut level_counts = vec![0u64; (2 * m + 1) as usize];
    for &x in samples {
        level_counts[(centered_level(x, step, m) + m) as usize] += 1;
    }
    let centroids: Vec<(f64, f64)> = level_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| ((i as i64 - m) as f64 * step, c as f64 / n))
        .collect();

    let mut kl = CompensatedSum::new();
    for (b, &count) in counts.iter().enumerate() {
        let (a, e) = (grid.edge(b), grid.edge(b + 1));
        let q_mass: f64 = centroids
            .iter()
            .map(|&(q, p)| p * kernel_mass(a, e, q, cfg.theta))
            .sum();
        let p_dens = (count as f64 / (n * grid.width)).max(DENSITY_FLOOR);
        let q_dens = (q_mass / grid.width).max(DENSITY_FLOOR);
        kl.add(grid.width * p_dens * (p_dens / q_dens).ln());
    }
    Ok(kl.value())
}
