use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cayley::{cayley_step, step_cap};
use super::loss::{loss_and_grad_rotated, loss_ps};
use super::transform::OrthoTransform;
use crate::activations::ActivationBatch;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr * (1 - step / total_steps)`.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Hadamard,
    /// QR of a seeded Gaussian matrix, per block.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsotConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Calibration samples per optimizer step.
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub blocks: usize,
    pub init: Init,
    /// Cap each step at `1 / ||A||_1` as in Cayley SGD.
    pub adaptive_cap: bool,
    /// Heavy-ball coefficient on the Euclidean gradient; 0 disables momentum.
    pub momentum: f64,
    pub seed: u64,
    /// Audit the analytic gradient against central differences on the first batch.
    pub fd_check: bool,
}

impl Default for PsotConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            learning_rate: 2.0,
            epochs: 15,
            batch_size: 4,
            lr_schedule: LrSchedule::LinearDecay,
            blocks: 2,
            init: Init::Hadamard,
            adaptive_cap: true,
            momentum: 0.0,
            seed: 0,
            fd_check: false,
        }
    }
}

impl PsotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.blocks == 0 {
            return Err(Error::InvalidSpec(
                "epochs, batch_size and blocks must all be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn initial_transform(&self, dim: usize) -> Result<OrthoTransform> {
        match self.init {
            Init::Hadamard => OrthoTransform::block_hadamard(dim, self.blocks),
            Init::Random => OrthoTransform::block_random(dim, self.blocks, self.seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsotOutcome {
    pub transform: OrthoTransform,
    /// Mean weighted loss of each epoch, accumulated over its minibatches.
    pub loss_trace: Vec<f64>,
    /// Largest `max |R^T R - I|` seen after any step.
    pub max_orthogonality_error: f64,
    pub steps: usize,
    /// Relative error of the analytic gradient on the first batch, when audited.
    pub fd_audit: Option<f64>,
}

struct Token<'a> {
    x: &'a [f64],
    weight: f64,
}

/// Weighted loss sum over `tokens` and the per-block gradient, both divided by the token count.
fn batch_loss_and_grad(tokens: &[Token<'_>], r: &OrthoTransform, temperature: f64) -> (f64, f64, Vec<DMatrix<f64>>) {
    let mut grads: Vec<DMatrix<f64>> = r
        .blocks()
        .iter()
        .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
        .collect();
    let mut loss = CompensatedSum::new();
    for tok in tokens {
        let u = r.apply(tok.x).expect("dimension checked");
        let (l, gu) = loss_and_grad_rotated(&u, temperature);
        loss.add(tok.weight * l);
        if l == 0.0 || tok.weight == 0.0 {
            continue;
        }
        for (g, &o) in grads.iter_mut().zip(r.offsets()) {
            let n = g.nrows();
            for i in 0..n {
                let xi = tok.weight * tok.x[o + i];
                if xi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    g[(i, j)] += xi * gu[o + j];
                }
            }
        }
    }
    let count = tokens.len() as f64;
    for g in &mut grads {
        *g /= count;
    }
    (loss.value(), count, grads)
}

/// Largest relative error between the analytic gradient and central differences
/// over the given tokens, for the mean weighted loss.
pub fn finite_difference_audit(
    tokens: &[(&[f64], f64)],
    r: &OrthoTransform,
    temperature: f64,
    h: f64,
) -> Result<f64> {
    let toks: Vec<Token<'_>> = tokens.iter().map(|&(x, weight)| Token { x, weight }).collect();
    let (_, count, grads) = batch_loss_and_grad(&toks, r, temperature);
    let objective = |blocks: Vec<DMatrix<f64>>| -> Result<f64> {
        let t = OrthoTransform::from_blocks_unchecked(blocks);
        let mut acc = CompensatedSum::new();
        for tok in &toks {
            acc.add(tok.weight * loss_ps(tok.x, &t, temperature)?);
        }
        Ok(acc.value() / count)
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, g) in grads.iter().enumerate() {
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let mut plus = r.blocks().to_vec();
                plus[b][(i, j)] += h;
                let mut minus = r.blocks().to_vec();
                minus[b][(i, j)] -= h;
                let fd = (objective(plus)? - objective(minus)?) / (2.0 * h);
                num += (fd - g[(i, j)]).powi(2);
                den += g[(i, j)].powi(2);
            }
        }
    }
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

/// Minibatch Cayley SGD on the weighted peak-suppression objective.
///
/// `weights` holds one entry per token, concatenated in sample order. Each step
/// covers `batch_size` calibration samples drawn from a seeded shuffle.
pub fn train_psot(
    samples: &[ActivationBatch],
    weights: &[f64],
    config: &PsotConfig,
) -> Result<PsotOutcome> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidSpec("PSOT needs at least one calibration sample".into()))?;
    let dim = first.dim();
    if let Some(b) = samples.iter().find(|b| b.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: b.dim(),
        });
    }
    let total: usize = samples.iter().map(ActivationBatch::n_tokens).sum();
    if weights.len() != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidSpec(
            "token weights must be finite, non-negative and not all zero".into(),
        ));
    }

    let mut per_sample: Vec<Vec<Token<'_>>> = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for s in samples {
        per_sample.push(
            s.tokens()
                .zip(&weights[offset..offset + s.n_tokens()])
                .map(|(x, &weight)| Token { x, weight })
                .collect(),
        );
        offset += s.n_tokens();
    }

    let mut r = config.initial_transform(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut velocity: Vec<DMatrix<f64>> = r
        .blocks()
        .iter()
        .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
        .collect();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut max_err = r.orthogonality_error();
    let mut fd_audit = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = CompensatedSum::new();
        let mut epoch_tokens = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let tokens: Vec<Token<'_>> = chunk
                .iter()
                .flat_map(|&s| per_sample[s].iter().map(|t| Token { x: t.x, weight: t.weight }))
                .collect();
            if config.fd_check && fd_audit.is_none() {
                let pairs: Vec<(&[f64], f64)> = tokens.iter().map(|t| (t.x, t.weight)).collect();
                fd_audit = Some(finite_difference_audit(&pairs, &r, config.temperature, 1e-5)?);
            }
            let (loss, count, grads) = batch_loss_and_grad(&tokens, &r, config.temperature);
            epoch_loss.add(loss);
            epoch_tokens += count;

            let lr = match config.lr_schedule {
                LrSchedule::LinearDecay => {
                    config.learning_rate * (1.0 - step as f64 / total_steps as f64)
                }
            };
            for ((block, g), v) in r.blocks_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                let direction = if config.momentum > 0.0 {
                    *v = &*v * config.momentum + g;
                    v.clone()
                } else {
                    g.clone()
                };
                let lr = if config.adaptive_cap {
                    lr.min(step_cap(block, &direction))
                } else {
                    lr
                };
                *block = cayley_step(block, &direction, lr).map_err(|e| Error::Training {
                    epoch,
                    batch: batch_idx,
                    source: Box::new(e),
                })?;
            }
            max_err = max_err.max(r.orthogonality_error());
            step += 1;
        }
        loss_trace.push(epoch_loss.value() / epoch_tokens);
    }

    Ok(PsotOutcome {
        transform: r,
        loss_trace,
        max_orthogonality_error: max_err,
        steps: step,
        fd_audit,
    })
}

/// Mean weighted loss of `samples` under `r`.
pub fn mean_weighted_loss(
    samples: &[ActivationBatch],
    weights: &[f64],
    r: &OrthoTransform,
    temperature: f64,
) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    let mut n = 0usize;
    let mut it = weights.iter();
    for t in samples.iter().flat_map(ActivationBatch::tokens) {
        let w = it.next().ok_or(Error::DimensionMismatch {
            expected: n + 1,
            found: weights.len(),
        })?;
        acc.add(w * loss_ps(t, r, temperature)?);
        n += 1;
    }
    Ok(acc.value() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{generate_synthetic, OutlierMode, SyntheticSpec};
    use crate::psot::cayley::cayley_step;
    use crate::psot::loss::grad_loss;

    fn samples(n: usize, dim: usize, tokens: usize) -> Vec<ActivationBatch> {
        (0..n)
            .map(|r| {
                generate_synthetic(&SyntheticSpec {
                    dim,
                    n_tokens: tokens,
                    outlier_rate: 0.05,
                    outlier_gain: 10.0,
                    outlier_mode: OutlierMode::PerChannel,
                    seed: 40,
                    ..Default::default()
                })
                .map(|b| {
                    // Same outlier channel, different draws per sample.
                    let noise = generate_synthetic(&SyntheticSpec {
                        dim,
                        n_tokens: tokens,
                        seed: 1000 + r as u64,
                        ..Default::default()
                    })
                    .unwrap();
                    let data = b.data().iter().zip(noise.data()).map(|(a, n)| a + 0.1 * n).collect();
                    ActivationBatch::new(data, tokens, dim, r as u64).unwrap()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let s = samples(2, 16, 32);
        let cfg = PsotConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = train_psot(&s, &vec![1.0; 64], &cfg).unwrap();
        assert_eq!(out.transform, OrthoTransform::block_hadamard(16, 2).unwrap());
        let no_epochs = PsotConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train_psot(&s, &vec![1.0; 64], &no_epochs).is_err());
    }

    #[test]
    fn weights_must_cover_tokens() {
        let s = samples(1, 8, 10);
        assert!(train_psot(&s, &[1.0; 9], &PsotConfig::default()).is_err());
        assert!(train_psot(&s, &[0.0; 10], &PsotConfig::default()).is_err());
    }

    #[test]
    fn small_step_descends() {
        let s = samples(1, 8, 16);
        let r = OrthoTransform::block_hadamard(8, 1).unwrap();
        let x = s[0].token(0);
        let before = loss_ps(x, &r, 2.0).unwrap();
        let g = &grad_loss(x, &r, 2.0).unwrap()[0];
        let next = OrthoTransform::from_blocks(vec![cayley_step(&r.blocks()[0], g, 1e-3).unwrap()]).unwrap();
        assert!(loss_ps(x, &next, 2.0).unwrap() < before);
    }

    #[test]
    fn training_is_deterministic_and_orthogonal() {
        let s = samples(6, 16, 24);
        let w = vec![1.0; 6 * 24];
        let cfg = PsotConfig {
            epochs: 4,
            batch_size: 2,
            learning_rate: 0.5,
            seed: 9,
            fd_check: true,
            ..Default::default()
        };
        let a = train_psot(&s, &w, &cfg).unwrap();
        let b = train_psot(&s, &w, &cfg).unwrap();
        assert_eq!(a.transform, b.transform);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.steps, 12);
        assert!(a.max_orthogonality_error < 1e-8);
        assert!(a.fd_audit.unwrap() < 1e-4);
        assert!(a.loss_trace.last().unwrap() <= &a.loss_trace[0]);
        let dense = a.transform.to_dense();
        assert!((0..8).all(|i| (8..16).all(|j| dense[(i, j)] == 0.0 && dense[(j, i)] == 0.0)));
    }

    #[test]
    fn rotation_preserves_energy() {
        let s = samples(4, 16, 24);
        let out = train_psot(&s, &vec![1.0; 96], &PsotConfig { epochs: 3, ..Default::default() }).unwrap();
        for t in s[0].tokens() {
            let y = out.transform.apply(t).unwrap();
            let (a, b) = (crate::numeric::l2_norm(t), crate::numeric::l2_norm(&y));
            assert!(((a - b) / a).abs() < 1e-9);
            assert!(crate::numeric::l2_norm(&super::super::loss::centering_project(&y)) <= a * (1.0 + 1e-12));
        }
    }
}
