//! Desk-scale toolkit for quantizer-facing activation shaping.
//!
//! - [`activations`]: calibration batches, synthetic generation, `ACTD` dumps.
//! - [`quantizer`]: per-token affine and centered clamped quantizers.
//! - [`infometrics`]: smoothed-KL analysis, clipping-error bounds and oracles.
//! - [`psot`]: peak-suppression orthogonal transforms trained by Cayley SGD.
//! - [`asot`]: adaptive outlier-token selection and token weights.
//! - [`lac`]: learnable activation clipping against a small reference block.
//! - [`pipeline`]: config parsing and the end-to-end calibration run.

pub mod activations;
pub mod asot;
pub mod error;
pub mod infometrics;
pub mod lac;
pub mod numeric;
pub mod pipeline;
pub mod psot;
pub mod quantizer;

pub use error::{Error, Result};
