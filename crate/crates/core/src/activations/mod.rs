//! Calibration activations: the batch type, pooled channel statistics,
//! a synthetic bell-shaped generator and the `ACTD` binary dump format.

mod dump;
mod synthetic;

pub use dump::{read_dump, write_dump, write_dump_as, DumpDtype};
pub use synthetic::{
    generate_calibration_set, generate_synthetic, generate_synthetic_planted, Family, OutlierMode, PlantedBatch,
    SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Row-major activation matrix: rows are tokens, columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    data: Vec<f64>,
    n_tokens: usize,
    dim: usize,
    sample_id: u64,
}

impl ActivationBatch {
    pub fn new(data: Vec<f64>, n_tokens: usize, dim: usize, sample_id: u64) -> Result<Self> {
        if n_tokens == 0 || dim == 0 {
            return Err(Error::InvalidSpec(format!(
                "batch must be non-empty (n_tokens = {n_tokens}, dim = {dim})"
            )));
        }
        if data.len() != n_tokens * dim {
            return Err(Error::DimensionMismatch {
                expected: n_tokens * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "non-finite value at token {}, channel {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            data,
            n_tokens,
            dim,
            sample_id,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], sample_id: u64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), rows.len(), dim, sample_id)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_id(&self) -> u64 {
        self.sample_id
    }

    pub fn with_sample_id(mut self, sample_id: u64) -> Self {
        self.sample_id = sample_id;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// New batch holding the listed tokens, in the given order.
    pub fn select_tokens(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_tokens {
                return Err(Error::InvalidSpec(format!(
                    "token index {i} out of range for {} tokens",
                    self.n_tokens
                )));
            }
            data.extend_from_slice(self.token(i));
        }
        Self::new(data, indices.len(), self.dim, self.sample_id)
    }

    /// Applies `f` to every token, producing a batch of the same shape.
    pub fn map_tokens<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(self.data.len());
        for t in self.tokens() {
            let out = f(t);
            if out.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: out.len(),
                });
            }
            data.extend(out);
        }
        Self::new(data, self.n_tokens, self.dim, self.sample_id)
    }

    /// Multiplies every entry by `t`.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        Self::new(
            self.data.iter().map(|v| v * t).collect(),
            self.n_tokens,
            self.dim,
            self.sample_id,
        )
    }
}

/// Pooled per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self {
            mu: self.mu.iter().map(|v| v * t).collect(),
            sigma: self.sigma.iter().map(|v| v * t.abs()).collect(),
        }
    }
}

pub fn channel_stats(batches: &[ActivationBatch]) -> Result<ChannelStats> {
    let first = batches
        .first()
        .ok_or_else(|| Error::InvalidSpec("channel_stats needs at least one batch".into()))?;
    let dim = first.dim();
    if let Some(b) = batches.iter().find(|b| b.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: b.dim(),
        });
    }
    let count: usize = batches.iter().map(ActivationBatch::n_tokens).sum();

    let mut sums = vec![CompensatedSum::new(); dim];
    for t in batches.iter().flat_map(ActivationBatch::tokens) {
        for (acc, &v) in sums.iter_mut().zip(t) {
            acc.add(v);
        }
    }
    let mu: Vec<f64> = sums.iter().map(|s| s.value() / count as f64).collect();

    let mut sq = vec![CompensatedSum::new(); dim];
    for t in batches.iter().flat_map(ActivationBatch::tokens) {
        for ((acc, &v), &m) in sq.iter_mut().zip(t).zip(&mu) {
            acc.add((v - m) * (v - m));
        }
    }
    let mut sigma = Vec::with_capacity(dim);
    for (j, acc) in sq.iter().enumerate() {
        let s = (acc.value() / count as f64).sqrt();
        if s <= 0.0 {
            return Err(Error::DegenerateChannel { channel: j });
        }
        sigma.push(s);
    }
    Ok(ChannelStats { mu, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> ActivationBatch {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        ActivationBatch::from_rows(&rows, 0).unwrap()
    }

    #[test]
    fn stats_of_single_batch() {
        let s = channel_stats(&[batch(&[&[1.0, 2.0], &[3.0, 4.0]])]).unwrap();
        assert_eq!(s.mu, vec![2.0, 3.0]);
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn stats_pool_across_batches() {
        let s = channel_stats(&[batch(&[&[0.0, 0.0]]), batch(&[&[2.0, 2.0]])]).unwrap();
        assert_eq!(s.mu, vec![1.0, 1.0]);
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let err = channel_stats(&[batch(&[&[1.0, 5.0], &[1.0, 5.0], &[1.0, 5.0]])]).unwrap_err();
        assert!(matches!(err, Error::DegenerateChannel { channel: 0 }));
    }

    #[test]
    fn stats_reject_mixed_dims() {
        let err = channel_stats(&[batch(&[&[0.0, 1.0]]), batch(&[&[1.0]])]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn batch_rejects_non_finite() {
        assert!(ActivationBatch::new(vec![1.0, f64::NAN], 1, 2, 0).is_err());
        assert!(ActivationBatch::new(vec![], 0, 2, 0).is_err());
    }
}
