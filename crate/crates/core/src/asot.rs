//! Adaptive outlier-token selection: standardized peak scores, the positional
//! inconsistency curve over a threshold grid, threshold selection and token weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationBatch, ChannelStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsotConfig {
    pub grid: Vec<f64>,
    pub delta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub m: usize,
    /// Weight selected tokens 1 and the rest 0 instead of γ and 1.
    pub outliers_only: bool,
}

impl Default for AsotConfig {
    fn default() -> Self {
        Self {
            grid: grid_range(2.0, 8.0, 0.25).expect("valid default grid"),
            delta: 0.02,
            tau: 0.4,
            gamma: 30.0,
            m: 10,
            outliers_only: false,
        }
    }
}

impl AsotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "threshold grid needs at least 3 points, got {}",
                self.grid.len()
            )));
        }
        if self.grid.iter().any(|k| !k.is_finite()) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec("threshold grid must be finite and strictly increasing".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidSpec(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidSpec(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "gamma must be finite and >= 1, got {}",
                self.gamma
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidSpec("m must be >= 1".into()));
        }
        Ok(())
    }
}

/// `start, start + step, ...` up to `end` inclusive (within 1e-9 steps).
pub fn grid_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && end.is_finite() && step > 0.0 && step.is_finite()) || end < start {
        return Err(Error::InvalidSpec(format!(
            "bad grid {start}:{end}:{step}, need start <= end and step > 0"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Parses `start:end:step`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(Error::InvalidSpec(format!("grid must look like start:end:step, got {text:?}")));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidSpec(format!("bad number {s:?} in grid {text:?}")))
    };
    grid_range(num(a)?, num(b)?, num(c)?)
}

/// Per-token `||(x - mu) / sigma||_inf`.
pub fn outlier_scores(sample: &ActivationBatch, stats: &ChannelStats) -> Result<Vec<f64>> {
    if sample.dim() != stats.dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.dim(),
            found: sample.dim(),
        });
    }
    Ok(sample
        .tokens()
        .map(|t| {
            t.iter()
                .zip(stats.mu.iter().zip(&stats.sigma))
                .map(|(x, (mu, sigma))| ((x - mu) / sigma).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Indices with score strictly above `k`, ascending.
pub fn token_set(scores: &[f64], k: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > k)
        .map(|(i, _)| i)
        .collect()
}

/// `1 - mean |T_r| / |union T_r|`; zero when the union is empty.
pub fn inconsistency_eta(sets: &[Vec<usize>]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let mut union: Vec<usize> = sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    if union.is_empty() {
        return 0.0;
    }
    let mean = sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64;
    1.0 - mean / union.len() as f64
}

/// Index of the smallest grid point whose forward difference `|Δη/Δk|` is below
/// `delta` while the mean set size is positive and below `tau * universe`. The
/// last grid point has no forward difference and is never chosen.
pub fn select_index(
    curve: &[(f64, f64)],
    mean_sizes: &[f64],
    universe: usize,
    delta: f64,
    tau: f64,
) -> Option<usize> {
    (0..curve.len().saturating_sub(1)).find(|&j| {
        let (k0, e0) = curve[j];
        let (k1, e1) = curve[j + 1];
        ((e1 - e0) / (k1 - k0)).abs() < delta
            && mean_sizes[j] > 0.0
            && mean_sizes[j] < tau * universe as f64
    })
}

/// `gamma` on selected indices, 1 elsewhere, concatenated in sample order.
pub fn token_weights(sets: &[Vec<usize>], n_tokens: usize, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "gamma must be finite and >= 1, got {gamma}; use the outliers-only mode instead of an infinite weight"
        )));
    }
    Ok(fill_weights(sets, n_tokens, gamma, 1.0))
}

/// 1 on selected indices, 0 elsewhere.
pub fn outlier_only_weights(sets: &[Vec<usize>], n_tokens: usize) -> Vec<f64> {
    fill_weights(sets, n_tokens, 1.0, 0.0)
}

fn fill_weights(sets: &[Vec<usize>], n_tokens: usize, hit: f64, miss: f64) -> Vec<f64> {
    let mut out = vec![miss; sets.len() * n_tokens];
    for (r, set) in sets.iter().enumerate() {
        for &i in set {
            out[r * n_tokens + i] = hit;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSelection {
    pub per_sample_sets: Vec<Vec<usize>>,
    pub k_star: f64,
    pub eta_curve: Vec<(f64, f64)>,
    /// Mean set size at each grid point.
    pub mean_set_sizes: Vec<f64>,
    pub weights: Vec<f64>,
    pub n_tokens: usize,
}

/// Runs the full selection over `samples` with pooled `stats`.
pub fn select_threshold(
    samples: &[ActivationBatch],
    stats: &ChannelStats,
    config: &AsotConfig,
) -> Result<OutlierSelection> {
    config.validate()?;
    if samples.len() != config.m {
        return Err(Error::InvalidSpec(format!(
            "expected m = {} calibration samples, got {}",
            config.m,
            samples.len()
        )));
    }
    let n_tokens = samples[0].n_tokens();
    if let Some(s) = samples.iter().find(|s| s.n_tokens() != n_tokens) {
        return Err(Error::InvalidSpec(format!(
            "all samples must have the same token count ({n_tokens}), found {}",
            s.n_tokens()
        )));
    }
    let scores: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| outlier_scores(s, stats))
        .collect::<Result<_>>()?;

    let points: Vec<(f64, f64)> = config
        .grid
        .par_iter()
        .map(|&k| {
            let sets: Vec<Vec<usize>> = scores.iter().map(|s| token_set(s, k)).collect();
            let mean = sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64;
            (inconsistency_eta(&sets), mean)
        })
        .collect();
    let eta_curve: Vec<(f64, f64)> = config.grid.iter().zip(&points).map(|(&k, p)| (k, p.0)).collect();
    let mean_set_sizes: Vec<f64> = points.iter().map(|p| p.1).collect();

    let j = select_index(&eta_curve, &mean_set_sizes, n_tokens, config.delta, config.tau)
        .ok_or_else(|| Error::SelectionFailure {
            curve: eta_curve.clone(),
        })?;
    let k_star = config.grid[j];
    let per_sample_sets: Vec<Vec<usize>> = scores.iter().map(|s| token_set(s, k_star)).collect();
    let weights = if config.outliers_only {
        outlier_only_weights(&per_sample_sets, n_tokens)
    } else {
        token_weights(&per_sample_sets, n_tokens, config.gamma)?
    };
    Ok(OutlierSelection {
        per_sample_sets,
        k_star,
        eta_curve,
        mean_set_sizes,
        weights,
        n_tokens,
    })
}
