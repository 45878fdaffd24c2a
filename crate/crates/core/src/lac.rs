//! Learnable activation clipping: choose the `(alpha, beta)` range scaling of the
//! per-token affine quantizer that best preserves a block's output.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationBatch;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::quantizer::{fake_quantize_batch, fake_quantize_weights, QuantizerSpec};

pub const CLIP_MIN: f64 = 0.5;
pub const CLIP_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Gelu,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Gelu => 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
        }
    }
}

/// `nonlinearity(X W)` with `W` of shape `dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskBlock {
    weight: DMatrix<f64>,
    nonlinearity: Nonlinearity,
    weight_bits: Option<u32>,
}

impl DeskBlock {
    /// With `weight_bits`, `W` is replaced by its per-channel fake-quantized version.
    pub fn new(weight: DMatrix<f64>, nonlinearity: Nonlinearity, weight_bits: Option<u32>) -> Result<Self> {
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(Error::InvalidSpec("block weight must be non-empty".into()));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("block weight has non-finite entries".into()));
        }
        let weight = match weight_bits {
            Some(bits) => fake_quantize_weights(&weight, bits)?,
            None => weight,
        };
        Ok(Self {
            weight,
            nonlinearity,
            weight_bits,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(dim, dim),
            nonlinearity: Nonlinearity::Identity,
            weight_bits: None,
        }
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn weight_bits(&self) -> Option<u32> {
        self.weight_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub alpha: f64,
    pub beta: f64,
}

impl ClipParams {
    pub const NEUTRAL: Self = Self { alpha: 1.0, beta: 1.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| (CLIP_MIN..=CLIP_MAX).contains(&v);
        if !(ok(alpha) && ok(beta)) {
            return Err(Error::InvalidSpec(format!(
                "clip ratios must lie in [{CLIP_MIN}, {CLIP_MAX}], got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

pub fn block_forward(x: &ActivationBatch, block: &DeskBlock) -> Result<DMatrix<f64>> {
    if x.dim() != block.weight.nrows() {
        return Err(Error::DimensionMismatch {
            expected: block.weight.nrows(),
            found: x.dim(),
        });
    }
    let xm = DMatrix::from_row_slice(x.n_tokens(), x.dim(), x.data());
    let mut out = xm * &block.weight;
    if block.nonlinearity != Nonlinearity::Identity {
        out.apply(|v| *v = block.nonlinearity.apply(*v));
    }
    Ok(out)
}

/// Per-token affine fake quantization with clipped step, then the block.
pub fn block_forward_quant(
    x: &ActivationBatch,
    block: &DeskBlock,
    clip: ClipParams,
    bits: u32,
) -> Result<DMatrix<f64>> {
    let spec = QuantizerSpec::affine(bits).with_clip(clip.alpha, clip.beta);
    block_forward(&fake_quantize_batch(x, &spec)?, block)
}

/// Mean squared entry difference.
pub fn output_mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    for (u, v) in a.iter().zip(b.iter()) {
        acc.add((u - v) * (u - v));
    }
    acc.value() / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LacMethod {
    /// Coarse grid, then coordinate-wise golden-section refinement.
    GridGolden,
    /// Projected descent on central finite differences from (0.95, 0.95).
    FdDescent { steps: usize, lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LacConfig {
    /// Grid points per axis over [0.5, 1].
    pub grid: usize,
    pub tol: f64,
    pub sweeps: usize,
    pub method: LacMethod,
}

impl Default for LacConfig {
    fn default() -> Self {
        Self {
            grid: 11,
            tol: 1e-3,
            sweeps: 3,
            method: LacMethod::GridGolden,
        }
    }
}

impl LacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::InvalidSpec(format!("clip grid needs >= 2 points per axis, got {}", self.grid)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidSpec(format!("tolerance must be positive, got {}", self.tol)));
        }
        if let LacMethod::FdDescent { lr, .. } = self.method {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidSpec(format!("descent lr must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub alpha: f64,
    pub beta: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LacOutcome {
    pub clip: ClipParams,
    pub mse: f64,
    /// Every evaluation in order.
    pub trace: Vec<MsePoint>,
}

struct Objective<'a> {
    x: &'a ActivationBatch,
    block: &'a DeskBlock,
    bits: u32,
    reference: DMatrix<f64>,
}

impl Objective<'_> {
    fn eval(&self, alpha: f64, beta: f64) -> Result<f64> {
        let clip = ClipParams::new(alpha.clamp(CLIP_MIN, CLIP_MAX), beta.clamp(CLIP_MIN, CLIP_MAX))?;
        Ok(output_mse(&self.reference, &block_forward_quant(self.x, self.block, clip, self.bits)?))
    }
}

struct Search<'a> {
    obj: Objective<'a>,
    trace: Vec<MsePoint>,
    best: MsePoint,
}

impl Search<'_> {
    fn eval(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        let mse = self.obj.eval(alpha, beta)?;
        self.record(MsePoint { alpha, beta, mse });
        Ok(mse)
    }

    fn record(&mut self, p: MsePoint) {
        self.trace.push(p);
        if p.mse < self.best.mse {
            self.best = p;
        }
    }

    // Golden-section over one coordinate with the other held at the incumbent.
    fn golden(&mut self, along_alpha: bool, tol: f64) -> Result<()> {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let fixed = if along_alpha { self.best.beta } else { self.best.alpha };
        let f = |s: &mut Self, t: f64| {
            if along_alpha {
                s.eval(t, fixed)
            } else {
                s.eval(fixed, t)
            }
        };
        let (mut a, mut b) = (CLIP_MIN, CLIP_MAX);
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let mut fc = f(self, c)?;
        let mut fd = f(self, d)?;
        while b - a > tol {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = f(self, c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = f(self, d)?;
            }
        }
        Ok(())
    }
}

/// Searches `(alpha, beta)` in `[0.5, 1]^2` for the lowest mean squared error between
/// the full-precision and activation-quantized block outputs.
///
/// The grid stage always includes the neutral point (1, 1) and the (0.95, 0.95)
/// initialization, so the result never does worse than either.
pub fn optimize_clipping(
    x: &ActivationBatch,
    block: &DeskBlock,
    bits: u32,
    config: &LacConfig,
) -> Result<LacOutcome> {
    config.validate()?;
    let obj = Objective {
        x,
        block,
        bits,
        reference: block_forward(x, block)?,
    };

    let mut cells: Vec<(f64, f64)> = Vec::with_capacity(config.grid * config.grid + 2);
    let axis: Vec<f64> = (0..config.grid)
        .map(|i| CLIP_MIN + (CLIP_MAX - CLIP_MIN) * i as f64 / (config.grid - 1) as f64)
        .collect();
    for &a in &axis {
        for &b in &axis {
            cells.push((a, b));
        }
    }
    for anchor in [(1.0, 1.0), (0.95, 0.95)] {
        if !cells.contains(&anchor) {
            cells.push(anchor);
        }
    }
    let grid_mse: Vec<f64> = cells
        .par_iter()
        .map(|&(a, b)| obj.eval(a, b))
        .collect::<Result<_>>()?;

    let mut search = Search {
        obj,
        trace: Vec::new(),
        best: MsePoint {
            alpha: 1.0,
            beta: 1.0,
            mse: f64::INFINITY,
        },
    };
    for (&(alpha, beta), &mse) in cells.iter().zip(&grid_mse) {
        search.record(MsePoint { alpha, beta, mse });
    }

    match config.method {
        LacMethod::GridGolden => {
            for _ in 0..config.sweeps {
                let before = search.best.mse;
                search.golden(true, config.tol)?;
                search.golden(false, config.tol)?;
                if search.best.mse >= before {
                    break;
                }
            }
        }
        LacMethod::FdDescent { steps, lr } => {
            let h: f64 = 1e-3;
            let (mut a, mut b): (f64, f64) = (0.95, 0.95);
            for _ in 0..steps {
                let ga = (search.eval((a + h).min(CLIP_MAX), b)? - search.eval((a - h).max(CLIP_MIN), b)?)
                    / ((a + h).min(CLIP_MAX) - (a - h).max(CLIP_MIN));
                let gb = (search.eval(a, (b + h).min(CLIP_MAX))? - search.eval(a, (b - h).max(CLIP_MIN))?)
                    / ((b + h).min(CLIP_MAX) - (b - h).max(CLIP_MIN));
                a = (a - lr * ga).clamp(CLIP_MIN, CLIP_MAX);
                b = (b - lr * gb).clamp(CLIP_MIN, CLIP_MAX);
                search.eval(a, b)?;
            }
        }
    }

    let best = search.best;
    Ok(LacOutcome {
        clip: ClipParams::new(best.alpha, best.beta)?,
        mse: best.mse,
        trace: search.trace,
    })
}

/// Output MSE at `alpha = beta = r` for each ratio.
pub fn clip_ratio_sweep(
    x: &ActivationBatch,
    block: &DeskBlock,
    bits: u32,
    ratios: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let reference = block_forward(x, block)?;
    ratios
        .iter()
        .map(|&r| {
            let out = block_forward_quant(x, block, ClipParams::new(r, r)?, bits)?;
            Ok((r, output_mse(&reference, &out)))
        })
        .collect()
}
