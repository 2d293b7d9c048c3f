//! Joint estimation of latent processes and sparse additive ODE dynamics
//! from noisy exponential-family observations.
//!
//! The crate is organized bottom-up:
//! - [`linalg`]: small dense solvers and quadrature helpers
//! - [`basis`]: B-spline bases, penalties, and the warped inner basis
//! - [`expfam`]: exponential-family cumulants, likelihoods, and sampling
//! - [`data`]: observation containers and validation
//! - [`simulate`]: ground-truth ODE network, integration, and sampling
//! - [`smooth`]: penalized likelihood smoothing with GCV selection
//! - [`sparsereg`]: adaptive group lasso solver
//! - [`engine`]: the joint block-coordinate fit, two-stage baseline, tuning
//! - [`evaluate`]: error and network-recovery metrics against a known truth

pub mod basis;
pub mod data;
pub mod engine;
pub mod evaluate;
pub mod expfam;
pub mod linalg;
pub mod simulate;
pub mod smooth;
pub mod sparsereg;
