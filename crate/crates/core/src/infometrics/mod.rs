//! Information-theoretic analysis of the centered clamped quantizer: cell
//! masses, expected clipping error, smoothed KL (direct and decomposed),
//! Gaussian/Laplace tail closed forms and bound thresholds, dispersion, and
//! the quadrature / Monte Carlo oracles used to check them.

mod bounds;
mod clip;
mod dist;
mod kl;
pub mod normal;
pub mod quadrature;
mod report;

pub use bounds::{bound_f, critical_kappa, oracle_tau_numeric, tau_closed_form};
pub use clip::{
    cell_masses, expected_clip_error, mass_entropy, normalized_clip_error, oracle_mc_clip_error,
    McEstimate,
};
pub use dist::{DistFamily, Empirical};
pub use kl::{
    histogram_entropy, smoothed_kl_decomposed, smoothed_kl_direct, KlDecomposition,
    SmoothedKlConfig, DEFAULT_BINS, DEFAULT_SUPPORT_SIGMAS, DENSITY_FLOOR,
};
pub use report::{
    dispersion_bn, pooled_metrics, token_metrics, value_metrics, MetricsOptions, MetricsReport,
};
