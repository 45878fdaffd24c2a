use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ActivationBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Laplace,
}

/// Where outliers are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    /// `ceil(outlier_rate * dim)` channels, shared by every token, are scaled by the gain.
    PerChannel,
    /// Each token is boosted independently with probability `outlier_rate`; a boosted
    /// token has its largest-magnitude coordinate scaled by the gain.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub dim: usize,
    pub n_tokens: usize,
    /// sigma for gaussian, b for laplace.
    pub scale: f64,
    pub outlier_rate: f64,
    pub outlier_gain: f64,
    pub outlier_mode: OutlierMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            dim: 64,
            n_tokens: 2048,
            scale: 1.0,
            outlier_rate: 0.0,
            outlier_gain: 1.0,
            outlier_mode: OutlierMode::PerChannel,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_tokens == 0 {
            return Err(Error::InvalidSpec(format!(
                "dim and n_tokens must be positive (dim = {}, n_tokens = {})",
                self.dim, self.n_tokens
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidSpec(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidSpec(format!(
                "outlier_rate must lie in [0, 1], got {}",
                self.outlier_rate
            )));
        }
        if !(self.outlier_gain >= 1.0 && self.outlier_gain.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "outlier_gain must be a finite value >= 1, got {}",
                self.outlier_gain
            )));
        }
        Ok(())
    }
}

/// A generated batch together with the ground truth of where outliers were planted.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBatch {
    pub batch: ActivationBatch,
    /// Boosted channels (per-channel mode), ascending.
    pub boosted_channels: Vec<usize>,
    /// Boosted tokens (per-token mode), ascending.
    pub boosted_tokens: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ActivationBatch> {
    generate_synthetic_planted(spec).map(|p| p.batch)
}

pub fn generate_synthetic_planted(spec: &SyntheticSpec) -> Result<PlantedBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = spec.n_tokens * spec.dim;
    let mut data: Vec<f64> = match spec.family {
        Family::Gaussian => (0..len)
            .map(|_| spec.scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Family::Laplace => (0..len).map(|_| laplace(&mut rng, spec.scale)).collect(),
    };

    let mut boosted_channels = Vec::new();
    let mut boosted_tokens = Vec::new();
    if spec.outlier_rate > 0.0 {
        match spec.outlier_mode {
            OutlierMode::PerChannel => {
                let count = ((spec.outlier_rate * spec.dim as f64).ceil() as usize).min(spec.dim);
                boosted_channels = index::sample(&mut rng, spec.dim, count).into_vec();
                boosted_channels.sort_unstable();
                for row in data.chunks_exact_mut(spec.dim) {
                    for &j in &boosted_channels {
                        row[j] *= spec.outlier_gain;
                    }
                }
            }
            OutlierMode::PerToken => {
                for (i, row) in data.chunks_exact_mut(spec.dim).enumerate() {
                    if rng.random::<f64>() < spec.outlier_rate {
                        let peak = peak_index(row);
                        row[peak] *= spec.outlier_gain;
                        boosted_tokens.push(i);
                    }
                }
            }
        }
    }

    Ok(PlantedBatch {
        batch: ActivationBatch::new(data, spec.n_tokens, spec.dim, spec.seed)?,
        boosted_channels,
        boosted_tokens,
    })
}

/// `m` calibration samples tagged `0..m`. Sample `r` draws its values from seed
/// `spec.seed + r` but reuses the planted structure of sample 0: the same boosted
/// channels, or in per-token mode the same boosted token positions.
pub fn generate_calibration_set(spec: &SyntheticSpec, m: usize) -> Result<Vec<PlantedBatch>> {
    if m == 0 {
        return Err(Error::InvalidSpec("calibration set needs at least one sample".into()));
    }
    let first = generate_synthetic_planted(spec)?;
    let mut out = Vec::with_capacity(m);
    for r in 1..m {
        let plain = generate_synthetic(&SyntheticSpec {
            seed: spec.seed.wrapping_add(r as u64),
            outlier_rate: 0.0,
            ..spec.clone()
        })?;
        let mut data = plain.data().to_vec();
        for &j in &first.boosted_channels {
            for row in data.chunks_exact_mut(spec.dim) {
                row[j] *= spec.outlier_gain;
            }
        }
        for &i in &first.boosted_tokens {
            let row = &mut data[i * spec.dim..(i + 1) * spec.dim];
            let peak = peak_index(row);
            row[peak] *= spec.outlier_gain;
        }
        out.push(PlantedBatch {
            batch: ActivationBatch::new(data, spec.n_tokens, spec.dim, r as u64)?,
            boosted_channels: first.boosted_channels.clone(),
            boosted_tokens: first.boosted_tokens.clone(),
        });
    }
    out.insert(
        0,
        PlantedBatch {
            batch: first.batch.with_sample_id(0),
            ..first
        },
    );
    Ok(out)
}

fn peak_index(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, _)| j)
        .unwrap_or(0)
}

// Inverse-CDF draw from Laplace(0, b).
fn laplace<R: Rng>(rng: &mut R, b: f64) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
