//! Uniform quantizers: per-token asymmetric affine with (alpha, beta) range scaling,
//! the centered clamped quantizer used by the error analysis, and a per-channel
//! round-to-nearest weight quantizer.
//!
//! Rounding is half away from zero throughout.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationBatch;
use crate::error::{Error, Result};
use crate::numeric::round_half_away;

const MIN_STEP: f64 = 1e-30;
const LEVEL_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    AffinePerToken,
    CenteredClamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub alpha: f64,
    pub beta: f64,
}

impl QuantizerSpec {
    pub fn affine(bits: u32) -> Self {
        Self {
            bits,
            scheme: Scheme::AffinePerToken,
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn centered(bits: u32) -> Self {
        Self {
            scheme: Scheme::CenteredClamped,
            ..Self::affine(bits)
        }
    }

    pub fn with_clip(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidSpec(format!(
                "bits must lie in [2, 16], got {}",
                self.bits
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.5..=1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0.5, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Largest affine code, `2^N - 1`.
    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }

    /// Largest centered level, `M = 2^(N-1) - 1`.
    pub fn max_level(&self) -> i64 {
        max_level(self.bits)
    }
}

pub fn max_level(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuantParams {
    Affine { step: f64, zero_point: i64, bits: u32 },
    /// Clipping scale is `levels * step`.
    Centered { step: f64, levels: i64 },
}

impl QuantParams {
    pub fn step(&self) -> f64 {
        match *self {
            QuantParams::Affine { step, .. } | QuantParams::Centered { step, .. } => step,
        }
    }

    pub fn zero_point(&self) -> i64 {
        match *self {
            QuantParams::Affine { zero_point, .. } => zero_point,
            QuantParams::Centered { .. } => 0,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        match *self {
            QuantParams::Affine { .. } => None,
            QuantParams::Centered { step, levels } => Some(levels as f64 * step),
        }
    }

    fn code_range(&self) -> (i64, i64) {
        match *self {
            QuantParams::Affine { bits, .. } => (0, (1i64 << bits) - 1),
            QuantParams::Centered { levels, .. } => (-levels, levels),
        }
    }
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Step size `(alpha * max - beta * min) / (2^N - 1)` of the clipped token range.
pub fn affine_step(x_min: f64, x_max: f64, spec: &QuantizerSpec) -> Result<f64> {
    if x_max <= x_min {
        return Err(Error::DegenerateRange { value: x_max });
    }
    let step = (spec.alpha * x_max - spec.beta * x_min) / spec.max_code() as f64;
    if !(step >= MIN_STEP) {
        return Err(Error::Numeric(format!(
            "step size {step:e} underflows or the clipped range is empty"
        )));
    }
    Ok(step)
}

pub fn affine_quantize_token(x: &[f64], spec: &QuantizerSpec) -> Result<(Vec<i64>, QuantParams)> {
    spec.validate()?;
    let (lo, hi) = min_max(x);
    let step = affine_step(lo, hi, spec)?;
    let max_code = spec.max_code();
    let zero_point = (-round_half_away(spec.beta * lo / step) as i64).clamp(0, max_code);
    let codes = x
        .iter()
        .map(|&v| (round_half_away(v / step) as i64 + zero_point).clamp(0, max_code))
        .collect();
    Ok((
        codes,
        QuantParams::Affine {
            step,
            zero_point,
            bits: spec.bits,
        },
    ))
}

/// Centered per-token quantization: `c = max(alpha * max, -beta * min)`, `s = c / M`.
pub fn centered_quantize_token(
    x: &[f64],
    spec: &QuantizerSpec,
) -> Result<(Vec<i64>, QuantParams)> {
    spec.validate()?;
    let (lo, hi) = min_max(x);
    let clip = (spec.alpha * hi).max(-spec.beta * lo);
    if !(clip > 0.0) {
        return Err(Error::DegenerateRange { value: hi });
    }
    let levels = spec.max_level();
    let step = clip / levels as f64;
    if step < MIN_STEP {
        return Err(Error::Numeric(format!("step size {step:e} underflows")));
    }
    let codes = x.iter().map(|&v| centered_level(v, step, levels)).collect();
    Ok((codes, QuantParams::Centered { step, levels }))
}

pub fn quantize_token(x: &[f64], spec: &QuantizerSpec) -> Result<(Vec<i64>, QuantParams)> {
    match spec.scheme {
        Scheme::AffinePerToken => affine_quantize_token(x, spec),
        Scheme::CenteredClamped => centered_quantize_token(x, spec),
    }
}

pub fn dequantize_token(codes: &[i64], params: &QuantParams) -> Result<Vec<f64>> {
    let (lo, hi) = params.code_range();
    if let Some((index, &code)) = codes.iter().enumerate().find(|(_, c)| !(lo..=hi).contains(*c)) {
        return Err(Error::CorruptCode { index, code, lo, hi });
    }
    Ok(match *params {
        QuantParams::Affine {
            step, zero_point, ..
        } => codes.iter().map(|&c| (c - zero_point) as f64 * step).collect(),
        QuantParams::Centered { step, levels } => {
            let clip = levels as f64 * step;
            codes
                .iter()
                .map(|&c| (c as f64 * step).clamp(-clip, clip))
                .collect()
        }
    })
}

/// Quantize then dequantize.
pub fn fake_quantize_token(x: &[f64], spec: &QuantizerSpec) -> Result<Vec<f64>> {
    let (codes, params) = quantize_token(x, spec)?;
    dequantize_token(&codes, &params)
}

/// Number of levels `M` such that `c = M * s`, or an error if `c` is not an
/// integer multiple of `s`.
pub fn levels_for(step: f64, clip: f64) -> Result<i64> {
    if !(step > 0.0 && clip > 0.0 && step.is_finite() && clip.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "step and clip must be positive and finite (s = {step}, c = {clip})"
        )));
    }
    let ratio = clip / step;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > LEVEL_REL_TOL * m {
        return Err(Error::InvalidSpec(format!(
            "clip {clip} is not a positive integer multiple of step {step}"
        )));
    }
    Ok(m as i64)
}

#[inline]
pub(crate) fn centered_level(x: f64, step: f64, levels: i64) -> i64 {
    (round_half_away(x / step) as i64).clamp(-levels, levels)
}

/// `clip(s * round(x / s), -c, c)`.
pub fn centered_clamped_quantize(x: f64, step: f64, clip: f64) -> Result<f64> {
    levels_for(step, clip)?;
    Ok(centered_clamp_unchecked(x, step, clip))
}

pub fn centered_clamped_quantize_slice(x: &[f64], step: f64, clip: f64) -> Result<Vec<f64>> {
    levels_for(step, clip)?;
    Ok(x.iter().map(|&v| centered_clamp_unchecked(v, step, clip)).collect())
}

#[inline]
pub(crate) fn centered_clamp_unchecked(x: f64, step: f64, clip: f64) -> f64 {
    (step * round_half_away(x / step)).clamp(-clip, clip)
}

/// Integer codes of a batch, one parameter set per token.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBatch {
    pub codes: Vec<i64>,
    pub n_tokens: usize,
    pub dim: usize,
    pub params: Vec<QuantParams>,
    pub spec: QuantizerSpec,
}

impl QuantizedBatch {
    pub fn token_codes(&self, i: usize) -> &[i64] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dequantize(&self) -> Result<ActivationBatch> {
        let mut data = Vec::with_capacity(self.codes.len());
        for (i, p) in self.params.iter().enumerate() {
            data.extend(dequantize_token(self.token_codes(i), p)?);
        }
        ActivationBatch::new(data, self.n_tokens, self.dim, 0)
    }
}

pub fn quantize_batch(batch: &ActivationBatch, spec: &QuantizerSpec) -> Result<QuantizedBatch> {
    spec.validate()?;
    let per_token: Vec<(Vec<i64>, QuantParams)> = (0..batch.n_tokens())
        .into_par_iter()
        .map(|i| quantize_token(batch.token(i), spec))
        .collect::<Result<_>>()?;
    let mut codes = Vec::with_capacity(batch.data().len());
    let mut params = Vec::with_capacity(per_token.len());
    for (c, p) in per_token {
        codes.extend(c);
        params.push(p);
    }
    Ok(QuantizedBatch {
        codes,
        n_tokens: batch.n_tokens(),
        dim: batch.dim(),
        params,
        spec: *spec,
    })
}

/// Per-token quantize/dequantize of a whole batch.
pub fn fake_quantize_batch(batch: &ActivationBatch, spec: &QuantizerSpec) -> Result<ActivationBatch> {
    quantize_batch(batch, spec)?
        .dequantize()
        .map(|b| b.with_sample_id(batch.sample_id()))
}

/// Mean squared error between a token and its dequantized reconstruction.
pub fn token_mse(x: &[f64], spec: &QuantizerSpec) -> Result<f64> {
    let xq = fake_quantize_token(x, spec)?;
    Ok(crate::numeric::sum(x.iter().zip(&xq).map(|(a, b)| (a - b) * (a - b))) / x.len() as f64)
}

/// Mean squared dequantization error over every entry of a batch.
pub fn batch_mse(batch: &ActivationBatch, spec: &QuantizerSpec) -> Result<f64> {
    let xq = fake_quantize_batch(batch, spec)?;
    Ok(crate::numeric::sum(
        batch
            .data()
            .iter()
            .zip(xq.data())
            .map(|(a, b)| (a - b) * (a - b)),
    ) / batch.data().len() as f64)
}

/// Asymmetric round-to-nearest quantization of each output channel (column) of `w`.
pub fn quantize_weights_per_channel(
    w: &DMatrix<f64>,
    bits: u32,
) -> Result<(Vec<Vec<i64>>, Vec<QuantParams>)> {
    let spec = QuantizerSpec::affine(bits);
    let mut codes = Vec::with_capacity(w.ncols());
    let mut params = Vec::with_capacity(w.ncols());
    for col in w.column_iter() {
        let column: Vec<f64> = col.iter().copied().collect();
        let (c, p) = affine_quantize_token(&column, &spec)?;
        codes.push(c);
        params.push(p);
    }
    Ok((codes, params))
}

pub fn fake_quantize_weights(w: &DMatrix<f64>, bits: u32) -> Result<DMatrix<f64>> {
    let (codes, params) = quantize_weights_per_channel(w, bits)?;
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    for (j, (c, p)) in codes.iter().zip(&params).enumerate() {
        for (i, v) in dequantize_token(c, p)?.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const X: [f64; 4] = [-1.0, 0.0, 0.5, 2.0];

    #[test]
    fn affine_two_bit_hand_case() {
        let (codes, params) = affine_quantize_token(&X, &QuantizerSpec::affine(2)).unwrap();
        assert_eq!(params.step(), 1.0);
        assert_eq!(params.zero_point(), 1);
        // 0.5 / 1 is a tie and rounds away from zero to 1, giving code 2.
        assert_eq!(codes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn clipped_step_size() {
        let spec = QuantizerSpec::affine(4).with_clip(0.9, 0.9);
        let (_, params) = affine_quantize_token(&X, &spec).unwrap();
        assert!((params.step() - 0.18).abs() < 1e-15);
    }

    #[test]
    fn constant_token_is_degenerate() {
        let err = affine_quantize_token(&[3.0, 3.0, 3.0], &QuantizerSpec::affine(4)).unwrap_err();
        assert!(matches!(err, Error::DegenerateRange { .. }));
    }

    #[test]
    fn spec_bounds_are_enforced() {
        assert!(QuantizerSpec::affine(1).validate().is_err());
        assert!(QuantizerSpec::affine(17).validate().is_err());
        assert!(QuantizerSpec::affine(4).with_clip(0.4, 1.0).validate().is_err());
    }

    #[test]
    fn dequantize_hand_case() {
        let params = QuantParams::Affine {
            step: 1.0,
            zero_point: 1,
            bits: 2,
        };
        assert_eq!(
            dequantize_token(&[0, 1, 1, 3], &params).unwrap(),
            vec![-1.0, 0.0, 0.0, 2.0]
        );
        assert_eq!(dequantize_token(&[1, 1], &params).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            dequantize_token(&[4], &params),
            Err(Error::CorruptCode { code: 4, .. })
        ));
    }

    #[test]
    fn centered_hand_cases() {
        assert_eq!(centered_clamped_quantize(4.7, 1.0, 3.0).unwrap(), 3.0);
        assert_eq!(centered_clamped_quantize(0.49, 1.0, 3.0).unwrap(), 0.0);
        assert_eq!(centered_clamped_quantize(-2.5, 1.0, 3.0).unwrap(), -3.0);
        assert!(centered_clamped_quantize(1.0, 1.0, 2.5).is_err());
    }

    #[test]
    fn centered_token_levels_stay_in_range() {
        let spec = QuantizerSpec::centered(3);
        let (codes, params) = centered_quantize_token(&[-4.0, 0.1, 1.0, 2.0], &spec).unwrap();
        assert_eq!(params.clip(), Some(4.0));
        assert!(codes.iter().all(|c| (-3..=3).contains(c)));
        assert_eq!(codes[0], -3);
    }

    #[test]
    fn interior_error_bound_and_clipping_identity_on_grid() {
        let (s, c) = (0.25, 1.75);
        for k in -4000..=4000 {
            let x = k as f64 * 1e-3;
            let q = centered_clamped_quantize(x, s, c).unwrap();
            if x.abs() <= c - s / 2.0 {
                assert!((x - q).abs() <= s / 2.0 + 1e-15, "x = {x}");
            }
            if x.abs() > c + s / 2.0 {
                assert!(((x - q).abs() - (x.abs() - c)).abs() < 1e-12, "x = {x}");
            }
        }
    }

    #[test]
    fn centered_quantizer_is_monotone() {
        let (s, c) = (0.3, 2.1);
        let mut prev = f64::NEG_INFINITY;
        for k in -5000..=5000 {
            let q = centered_clamped_quantize(k as f64 * 7e-4, s, c).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn weight_channel_reuses_affine_case() {
        let w = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 2.0]);
        let (codes, params) = quantize_weights_per_channel(&w, 2).unwrap();
        assert_eq!(codes[0], vec![0, 1, 3]);
        assert_eq!(params[0].step(), 1.0);

        let on_grid = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let (codes, _) = quantize_weights_per_channel(&on_grid, 2).unwrap();
        assert_eq!(codes[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn weight_dequantization_error_is_half_step() {
        let w = DMatrix::from_fn(8, 8, |i, j| ((i * 13 + j * 7) % 11) as f64 / 3.0 - 1.7);
        let wq = fake_quantize_weights(&w, 4).unwrap();
        let (_, params) = quantize_weights_per_channel(&w, 4).unwrap();
        for j in 0..8 {
            let s = params[j].step();
            for i in 0..8 {
                assert!((w[(i, j)] - wq[(i, j)]).abs() <= s / 2.0 + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn affine_codes_in_range(
            x in proptest::collection::vec(-50.0f64..50.0, 2..40),
            bits in 2u32..9,
            alpha in 0.5f64..=1.0,
            beta in 0.5f64..=1.0,
        ) {
            let spec = QuantizerSpec::affine(bits).with_clip(alpha, beta);
            if let Ok((codes, _)) = affine_quantize_token(&x, &spec) {
                prop_assert!(codes.iter().all(|&c| (0..=spec.max_code()).contains(&c)));
            }
        }

        #[test]
        fn quantization_is_idempotent(
            x in proptest::collection::vec(-10.0f64..10.0, 3..30),
            bits in 2u32..9,
        ) {
            let spec = QuantizerSpec::affine(bits);
            prop_assume!(affine_quantize_token(&x, &spec).is_ok());
            let (codes, params) = affine_quantize_token(&x, &spec).unwrap();
            let xq = dequantize_token(&codes, &params).unwrap();
            let codes_again: Vec<i64> = xq
                .iter()
                .map(|&v| (round_half_away(v / params.step()) as i64 + params.zero_point())
                    .clamp(0, spec.max_code()))
                .collect();
            prop_assert_eq!(codes_again, codes);
        }

        #[test]
        fn centered_levels_in_range(x in -100.0f64..100.0, m in 1i64..200, s in 0.01f64..3.0) {
            let c = m as f64 * s;
            let q = centered_clamped_quantize(x, s, c).unwrap();
            prop_assert!(q.abs() <= c);
            prop_assert!(centered_level(x, s, m).abs() <= m);
        }
    }
}
