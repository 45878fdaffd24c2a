use std::f64::consts::{E, PI, SQRT_2};

use crate::activations::Family;
use crate::error::{Error, Result};
use crate::numeric::population_std;

use super::normal;

/// Raw samples plus their population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Empirical {
    samples: Vec<f64>,
    sigma: f64,
}

impl Empirical {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidSpec("empirical distribution needs at least 2 samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("empirical samples must be finite".into()));
        }
        let sigma = population_std(&samples);
        if !(sigma > 0.0) {
            return Err(Error::InvalidSpec("empirical samples have zero spread".into()));
        }
        Ok(Self { samples, sigma })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// A centered symmetric activation distribution, or a bag of samples.
#[derive(Debug, Clone, PartialEq)]
pub enum DistFamily {
    Gaussian { sigma: f64 },
    /// Parameterized by its standard deviation; the Laplace scale is `sigma / sqrt(2)`.
    Laplace { sigma: f64 },
    Empirical(Empirical),
}

impl DistFamily {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(DistFamily::Gaussian { sigma })
    }

    pub fn laplace(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(DistFamily::Laplace { sigma })
    }

    pub fn laplace_from_scale(b: f64) -> Result<Self> {
        Self::laplace(SQRT_2 * b)
    }

    pub fn analytic(family: Family, sigma: f64) -> Result<Self> {
        match family {
            Family::Gaussian => Self::gaussian(sigma),
            Family::Laplace => Self::laplace(sigma),
        }
    }

    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        Empirical::new(samples).map(DistFamily::Empirical)
    }

    pub fn sigma(&self) -> f64 {
        match self {
            DistFamily::Gaussian { sigma } | DistFamily::Laplace { sigma } => *sigma,
            DistFamily::Empirical(e) => e.sigma,
        }
    }

    pub fn family(&self) -> Option<Family> {
        match self {
            DistFamily::Gaussian { .. } => Some(Family::Gaussian),
            DistFamily::Laplace { .. } => Some(Family::Laplace),
            DistFamily::Empirical(_) => None,
        }
    }

    /// Density at `x`; `None` for empirical distributions.
    pub fn pdf(&self, x: f64) -> Option<f64> {
        match *self {
            DistFamily::Gaussian { sigma } => Some(normal::pdf(x / sigma) / sigma),
            DistFamily::Laplace { sigma } => {
                let b = sigma / SQRT_2;
                Some((-x.abs() / b).exp() / (2.0 * b))
            }
            DistFamily::Empirical(_) => None,
        }
    }

    /// `P(X >= x)`; `None` for empirical distributions.
    pub fn survival(&self, x: f64) -> Option<f64> {
        match *self {
            DistFamily::Gaussian { sigma } => Some(normal::survival(x / sigma)),
            DistFamily::Laplace { sigma } => {
                let b = sigma / SQRT_2;
                Some(if x >= 0.0 {
                    0.5 * (-x / b).exp()
                } else {
                    1.0 - 0.5 * (x / b).exp()
                })
            }
            DistFamily::Empirical(_) => None,
        }
    }

    /// Closed-form differential entropy in nats; `None` for empirical distributions.
    pub fn differential_entropy(&self) -> Option<f64> {
        match *self {
            DistFamily::Gaussian { sigma } => Some(0.5 * (2.0 * PI * E * sigma * sigma).ln()),
            DistFamily::Laplace { sigma } => Some(1.0 + (2.0 * sigma / SQRT_2).ln()),
            DistFamily::Empirical(_) => None,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("sigma must be positive, got {sigma}")))
    }
}
