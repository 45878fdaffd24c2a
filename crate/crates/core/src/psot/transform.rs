use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerance on `max |R_b^T R_b - I|` for every block.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

/// Block-diagonal orthogonal matrix acting on row vectors (`y = x R`).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoTransform {
    blocks: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
    dim: usize,
}

/// Sylvester-construction Hadamard matrix scaled by `1/sqrt(dim)`.
pub fn hadamard(dim: usize) -> Result<DMatrix<f64>> {
    if !dim.is_power_of_two() {
        return Err(Error::UnsupportedDimension(dim));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    // H[i, j] = (-1)^popcount(i & j).
    Ok(DMatrix::from_fn(dim, dim, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    }))
}

/// Haar-ish random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the factorization is unique.
    let mut q = q;
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    let n = m.nrows();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

fn equal_blocks(dim: usize, n_blocks: usize) -> Result<usize> {
    if n_blocks == 0 || dim % n_blocks != 0 {
        return Err(Error::InvalidSpec(format!(
            "cannot split dimension {dim} into {n_blocks} equal blocks"
        )));
    }
    let size = dim / n_blocks;
    if !size.is_power_of_two() {
        return Err(Error::UnsupportedDimension(size));
    }
    Ok(size)
}

impl OrthoTransform {
    /// Validates shapes, power-of-two block sizes and orthogonality.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidSpec("transform needs at least one block".into()));
        }
        for (b, m) in blocks.iter().enumerate() {
            if m.nrows() != m.ncols() {
                return Err(Error::InvalidSpec(format!(
                    "block {b} is {}x{}, not square",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !m.nrows().is_power_of_two() {
                return Err(Error::UnsupportedDimension(m.nrows()));
            }
            let drift = orthogonality_error(m);
            if !(drift < ORTHOGONALITY_TOL) {
                return Err(Error::Numeric(format!(
                    "block {b} is not orthogonal (max |R^T R - I| = {drift:e})"
                )));
            }
        }
        Ok(Self::from_blocks_unchecked(blocks))
    }

    pub(crate) fn from_blocks_unchecked(blocks: Vec<DMatrix<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for m in &blocks {
            offsets.push(dim);
            dim += m.nrows();
        }
        Self {
            blocks,
            offsets,
            dim,
        }
    }

    pub fn identity(dim: usize, n_blocks: usize) -> Result<Self> {
        let size = equal_blocks(dim, n_blocks)?;
        Ok(Self::from_blocks_unchecked(vec![DMatrix::identity(size, size); n_blocks]))
    }

    /// `n_blocks` equal Hadamard blocks along the diagonal.
    pub fn block_hadamard(dim: usize, n_blocks: usize) -> Result<Self> {
        let size = equal_blocks(dim, n_blocks)?;
        let h = hadamard(size)?;
        Ok(Self::from_blocks_unchecked(vec![h; n_blocks]))
    }

    pub fn block_random(dim: usize, n_blocks: usize, seed: u64) -> Result<Self> {
        let size = equal_blocks(dim, n_blocks)?;
        Ok(Self::from_blocks_unchecked(
            (0..n_blocks)
                .map(|b| random_orthogonal(size, seed.wrapping_add(b as u64)))
                .collect(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.blocks
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|m| m.nrows()).collect()
    }

    pub(crate) fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `x R`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut y = vec![0.0; self.dim];
        for (m, &o) in self.blocks.iter().zip(&self.offsets) {
            let n = m.nrows();
            let xb = &x[o..o + n];
            for (j, yj) in y[o..o + n].iter_mut().enumerate() {
                *yj = m.column(j).iter().zip(xb).map(|(r, v)| r * v).sum();
            }
        }
        Ok(y)
    }

    /// Applies the transform to every token of a batch.
    pub fn apply_batch(
        &self,
        batch: &crate::activations::ActivationBatch,
    ) -> Result<crate::activations::ActivationBatch> {
        if batch.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: batch.dim(),
            });
        }
        batch.map_tokens(|t| self.apply(t).expect("dimension checked"))
    }

    /// Largest `max |R_b^T R_b - I|` over blocks.
    pub fn orthogonality_error(&self) -> f64 {
        self.blocks.iter().map(orthogonality_error).fold(0.0, f64::max)
    }

    /// Full `dim x dim` matrix with zeros off the blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (m, &o) in self.blocks.iter().zip(&self.offsets) {
            out.view_mut((o, o), (m.nrows(), m.ncols())).copy_from(m);
        }
        out
    }
}
