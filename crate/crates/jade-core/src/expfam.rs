//! Exponential families in canonical form: cumulant functions, averaged
//! negative log-likelihood, and observation sampling.
//!
//! The likelihood is kept on the canonical scale with unit dispersion; the
//! Gaussian case drops the constant y^2 terms, so objective values are
//! comparable only within a fixed dataset (which is all the optimizer needs).

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::logistic;

#[derive(Debug, Error)]
pub enum ExpfamError {
    #[error("theta values ({theta}) and observations ({obs}) have different lengths")]
    DimensionMismatch { theta: usize, obs: usize },
    #[error("negloglik needs at least one observation")]
    Empty,
    #[error("binomial trials must be positive")]
    ZeroTrials,
}

/// Observation distribution, tagged for JSON metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Binomial { trials: u64 },
}

/// Cumulant value and its first two derivatives at a canonical parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cumulant {
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Family {
    pub fn cumulant(&self, theta: f64) -> Cumulant {
        match self {
            Family::Gaussian => Cumulant {
                b: 0.5 * theta * theta,
                b1: theta,
                b2: 1.0,
            },
            Family::Poisson => {
                let e = theta.exp();
                Cumulant { b: e, b1: e, b2: e }
            }
            Family::Binomial { trials } => {
                let m = *trials as f64;
                let p = logistic(theta);
                Cumulant {
                    b: m * softplus(theta),
                    b1: m * p,
                    b2: m * p * (1.0 - p),
                }
            }
        }
    }

    /// Average negative log-likelihood `-(1/N) sum_i (y_i theta_i - b(theta_i))`
    /// over the supplied rows. `N` counts every row, so replicated designs are
    /// averaged over both time points and replicates.
    pub fn negloglik(&self, theta: &[f64], y: &[f64]) -> Result<f64, ExpfamError> {
        if theta.len() != y.len() {
            return Err(ExpfamError::DimensionMismatch {
                theta: theta.len(),
                obs: y.len(),
            });
        }
        if theta.is_empty() {
            return Err(ExpfamError::Empty);
        }
        let mut total = 0.0;
        for (t, yv) in theta.iter().zip(y) {
            total += yv * t - self.cumulant(*t).b;
        }
        Ok(-total / theta.len() as f64)
    }

    /// Draw one observation at canonical parameter `theta`. The Gaussian case
    /// has unit variance; scaled noise is applied by the caller.
    pub fn sample<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => Normal::new(theta, 1.0).unwrap().sample(rng),
            Family::Poisson => Poisson::new(theta.exp()).unwrap().sample(rng) as f64,
            Family::Binomial { trials } => {
                let p = logistic(theta);
                rand_distr::Binomial::new(*trials, p).unwrap().sample(rng) as f64
            }
        }
    }

    /// Valid observed value for this family (used by dataset validation).
    pub fn valid_value(&self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            Family::Binomial { trials } => {
                y.is_finite() && y >= 0.0 && y.fract() == 0.0 && y <= *trials as f64
            }
        }
    }
}
