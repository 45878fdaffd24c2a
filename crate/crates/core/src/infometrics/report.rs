use serde::Serialize;

use crate::activations::{ActivationBatch, Family};
use crate::error::{Error, Result};
use crate::numeric::{l2_norm, linf_norm, mean, population_std, sum};
use crate::quantizer::{centered_clamp_unchecked, max_level};

use super::bounds::tau_closed_form;
use super::clip::cell_masses;
use super::clip::mass_entropy;
use super::dist::DistFamily;
use super::kl::{smoothed_kl_decomposed, smoothed_kl_direct, SmoothedKlConfig};

/// Range-normalized dispersion `sqrt(1/d) * ||t||_2 / ||t||_inf`.
pub fn dispersion_bn(token: &[f64]) -> Result<f64> {
    let peak = linf_norm(token);
    if peak == 0.0 || token.is_empty() {
        return Err(Error::UndefinedDispersion);
    }
    Ok((1.0 / token.len() as f64).sqrt() * l2_norm(token) / peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsOptions {
    pub bits: u32,
    pub bound_family: Family,
    /// Kernel width as a fraction of the step size.
    pub theta_ratio: f64,
    pub bins: usize,
    pub support_sigmas: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            bits: 4,
            bound_family: Family::Gaussian,
            theta_ratio: 0.05,
            bins: super::kl::DEFAULT_BINS,
            support_sigmas: super::kl::DEFAULT_SUPPORT_SIGMAS,
        }
    }
}

/// Quantizer-facing statistics of one group of values under the centered
/// clamped quantizer with `c = max|t|` and `s = c / M`.
///
/// KL fields are only filled when the group has at least 1000 values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub lambda: f64,
    pub kappa: f64,
    pub b_n: f64,
    pub s_bar: f64,
    pub e_clip: f64,
    pub e_clip_norm: f64,
    pub bound: f64,
    pub kl_direct: Option<f64>,
    pub kl_decomposed: Option<f64>,
    pub h_p: Option<f64>,
    pub h_masses: f64,
}

impl MetricsReport {
    pub const HEADER: [&'static str; 11] = [
        "lambda",
        "kappa",
        "b_n",
        "s_bar",
        "e_clip",
        "e_clip_norm",
        "bound",
        "kl_direct",
        "kl_decomposed",
        "h_p",
        "h_masses",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.lambda.to_string(),
            self.kappa.to_string(),
            self.b_n.to_string(),
            self.s_bar.to_string(),
            self.e_clip.to_string(),
            self.e_clip_norm.to_string(),
            self.bound.to_string(),
            opt(self.kl_direct),
            opt(self.kl_decomposed),
            opt(self.h_p),
            self.h_masses.to_string(),
        ]
    }
}

pub fn value_metrics(values: &[f64], opts: &MetricsOptions) -> Result<MetricsReport> {
    if !(2..=16).contains(&opts.bits) {
        return Err(Error::InvalidSpec(format!("bits must lie in [2, 16], got {}", opts.bits)));
    }
    let mu = mean(values);
    let centered: Vec<f64> = values.iter().map(|v| v - mu).collect();
    let sigma = population_std(&centered);
    let clip = linf_norm(&centered);
    if !(sigma > 0.0 && clip > 0.0) {
        return Err(Error::UndefinedDispersion);
    }
    let levels = max_level(opts.bits);
    let step = clip / levels as f64;

    let kappa = clip / sigma;
    let b_n = 1.0 / kappa;
    let s_bar = step / clip;
    let lambda = s_bar / b_n;

    let e_clip = sum(centered
        .iter()
        .map(|&x| (x - centered_clamp_unchecked(x, step, clip)).abs()))
        / centered.len() as f64;
    let bound = lambda / 2.0 + tau_closed_form(opts.bound_family, kappa)?;

    let dist = DistFamily::empirical(centered)?;
    let h_masses = mass_entropy(&cell_masses(&dist, step, clip)?);

    let (kl_direct, kl_decomposed, h_p) = match &dist {
        DistFamily::Empirical(e) if e.samples().len() >= 1000 => {
            let cfg = SmoothedKlConfig {
                theta: opts.theta_ratio * step,
                bins: opts.bins,
                support_sigmas: opts.support_sigmas,
            };
            let direct = smoothed_kl_direct(e.samples(), step, clip, &cfg)?;
            let dec = smoothed_kl_decomposed(&dist, step, clip, &cfg)?;
            (Some(direct), Some(dec.value), Some(dec.h_p))
        }
        _ => (None, None, None),
    };

    Ok(MetricsReport {
        lambda,
        kappa,
        b_n,
        s_bar,
        e_clip,
        e_clip_norm: e_clip / sigma,
        bound,
        kl_direct,
        kl_decomposed,
        h_p,
        h_masses,
    })
}

pub fn token_metrics(batch: &ActivationBatch, opts: &MetricsOptions) -> Result<Vec<MetricsReport>> {
    use rayon::prelude::*;
    (0..batch.n_tokens())
        .into_par_iter()
        .map(|i| value_metrics(batch.token(i), opts))
        .collect()
}

pub fn pooled_metrics(batches: &[ActivationBatch], opts: &MetricsOptions) -> Result<MetricsReport> {
    let values: Vec<f64> = batches.iter().flat_map(|b| b.data().iter().copied()).collect();
    value_metrics(&values, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dispersion_hand_cases() {
        let bn = dispersion_bn(&[3.0, -1.0, 1.0, -3.0]).unwrap();
        assert!((bn - 5f64.sqrt() / 3.0).abs() < 1e-15);
        assert!((bn - 0.745_356).abs() < 1e-6);
        let mut e = vec![0.0; 16];
        e[5] = -2.0;
        assert!((dispersion_bn(&e).unwrap() - 0.25).abs() < 1e-15);
        assert!((dispersion_bn(&[2.0, -2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(dispersion_bn(&[0.0, 0.0]), Err(Error::UndefinedDispersion)));
    }

    #[test]
    fn report_on_a_token() {
        let r = value_metrics(&[3.0, -1.0, 1.0, -3.0], &MetricsOptions::default()).unwrap();
        assert!((r.b_n - 5f64.sqrt() / 3.0).abs() < 1e-15);
        assert!((r.s_bar - 1.0 / 7.0).abs() < 1e-15);
        assert!(r.kl_direct.is_none());
    }

    proptest! {
        #[test]
        fn report_identities_hold_exactly(
            values in proptest::collection::vec(-20.0f64..20.0, 4..64),
            bits in 2u32..9,
        ) {
            let opts = MetricsOptions { bits, ..Default::default() };
            if let Ok(r) = value_metrics(&values, &opts) {
                prop_assert_eq!(r.b_n, 1.0 / r.kappa);
                prop_assert_eq!(r.lambda, r.s_bar / r.b_n);
                prop_assert!(r.h_masses <= ((2 * max_level(bits) + 1) as f64).ln() + 1e-12);
                // With c = max|t| nothing is clipped, so the in-range term alone bounds the error.
                prop_assert!(r.e_clip_norm <= r.lambda / 2.0 + 1e-12);
            }
        }
    }
}
