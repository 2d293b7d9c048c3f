//! Joint estimation of latent trajectories and sparse additive
//! derivative models by block coordinate descent.
//!
//! The objective couples three terms over p processes:
//!
//! ```text
//! Q(c, gamma) = sum_j nll_j(c_j)
//!             + lambda_theta * sum_j  int ( c_j' dpsi(t)
//!                 - gamma_j0 - sum_k gamma_jk' phi(sigma(c_k' psi(t))) )^2 dt
//!             + lambda_gamma * sum_{j,k} w_jk ||gamma_jk||_2
//! ```
//!
//! Latent blocks c_j are updated cyclically by a diagonally scaled
//! gradient step with a backtracking line search; model blocks gamma_j
//! are independent given c and are each minimized exactly by the
//! adaptive group lasso solver. Adaptive weights are computed once from
//! a unit-weight pilot in the first model round and then frozen, which
//! keeps the recorded objective a single well-defined function and its
//! trace non-increasing. Mean-centering of the additive components (an
//! identifiability convention, not an optimization step) runs once at
//! the end of the fit; it changes no predicted derivative value.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineBasis, BasisError, TransformedBasis};
use crate::data::{DataError, Dataset};
use crate::linalg::trapezoid_rule;
use crate::smooth::{self, SmoothError};
use crate::sparsereg::{adaptive_weights, GroupProblem, GroupSolution, SparseRegError};

const MAX_BACKTRACKS: usize = 60;
/// Floor applied inside the model-selection score before taking logs.
const RESIDUAL_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset failed validation: {0}")]
    Data(#[from] DataError),
    #[error("latent initialization failed for process {process}: {source}")]
    Init { process: usize, source: SmoothError },
    #[error("basis construction failed: {0}")]
    Basis(#[from] BasisError),
    #[error("state shaped ({0} processes, {1} latent, {2} per block) does not match the engine")]
    Dimension(usize, usize, usize),
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error("sparse regression failed: {0}")]
    SparseReg(#[from] SparseRegError),
}

/// Penalty level for the model blocks: a fixed value, or selected by the
/// tuning score over the default grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaGamma {
    Auto,
    Value(f64),
}

impl Serialize for LambdaGamma {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LambdaGamma::Auto => s.serialize_str("auto"),
            LambdaGamma::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaGamma {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(LambdaGamma::Value(x)),
            Raw::Word(w) if w == "auto" => Ok(LambdaGamma::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got {w:?}"
            ))),
        }
    }
}

/// Backtracking line-search constants for the latent updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoParams {
    /// Step shrink factor per backtrack.
    pub eta: f64,
    /// Sufficient-decrease fraction.
    pub zeta: f64,
    /// Curvature weight in the acceptance slope.
    pub kappa: f64,
    /// First step size tried.
    pub alpha_init: f64,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self { eta: 0.5, zeta: 0.1, kappa: 0.0, alpha_init: 1.0 }
    }
}

/// Grid used when centering the additive components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenteringGrid {
    Quadrature,
}

/// Estimator behind the adaptive penalty weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotScheme {
    /// Unit-weight group lasso at the same penalty level as the final
    /// solve. A block the pilot zeroes gets an infinite weight, so it can
    /// never re-enter at that penalty level.
    MatchLambda,
    /// Ridge least squares. Every block keeps a finite weight, so the
    /// final solve alone decides what is zero.
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JadeConfig {
    /// Weight of the derivative-fidelity term. Must be positive.
    pub lambda_theta: f64,
    pub lambda_gamma: LambdaGamma,
    /// Exponent of the adaptive penalty weights.
    pub nu: f64,
    pub armijo: ArmijoParams,
    /// Clipping interval for the diagonal curvature estimates.
    pub hessian_clip: (f64, f64),
    pub max_outer: usize,
    /// Node count of the shared trapezoid rule on the time span.
    pub quad_nodes: usize,
    /// Relative objective-change threshold for early stopping.
    pub tol: f64,
    pub centering_grid: CenteringGrid,
    /// Latent basis size override; the default grows with the number of
    /// observation times as min(ceil(n/4) + 4, 35).
    pub latent_dim: Option<usize>,
    pub pilot: PilotScheme,
}

impl Default for JadeConfig {
    fn default() -> Self {
        Self {
            lambda_theta: 1.0,
            lambda_gamma: LambdaGamma::Auto,
            nu: 1.0,
            armijo: ArmijoParams::default(),
            hessian_clip: (1e-3, 1e6),
            max_outer: 4,
            quad_nodes: 401,
            tol: 1e-8,
            centering_grid: CenteringGrid::Quadrature,
            latent_dim: None,
            pilot: PilotScheme::MatchLambda,
        }
    }
}

impl JadeConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.lambda_theta > 0.0) || !self.lambda_theta.is_finite() {
            return bad("lambda_theta must be positive and finite");
        }
        if let LambdaGamma::Value(v) = self.lambda_gamma {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("lambda_gamma must be nonnegative and finite");
            }
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return bad("nu must be positive and finite");
        }
        let a = self.armijo;
        if !(a.eta > 0.0 && a.eta < 1.0) {
            return bad("armijo.eta must lie in (0, 1)");
        }
        if !(a.zeta > 0.0 && a.zeta < 1.0) {
            return bad("armijo.zeta must lie in (0, 1)");
        }
        if !(a.kappa >= 0.0 && a.kappa < 1.0) {
            return bad("armijo.kappa must lie in [0, 1)");
        }
        if !(a.alpha_init > 0.0) || !a.alpha_init.is_finite() {
            return bad("armijo.alpha_init must be positive and finite");
        }
        let (lo, hi) = self.hessian_clip;
        if !(lo > 0.0 && lo <= hi) || !hi.is_finite() {
            return bad("hessian_clip must satisfy 0 < lo <= hi < inf");
        }
        if self.quad_nodes < 2 {
            return bad("quad_nodes must be at least 2");
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return bad("tol must be positive and finite");
        }
        if let Some(m) = self.latent_dim {
            if m < 4 {
                return bad("latent_dim must be at least 4 (cubic splines)");
            }
        }
        Ok(())
    }
}

/// Estimation method: the joint refinement, or the baseline that keeps
/// the smoothed latent curves fixed and fits the model once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Jade,
    TwoStage,
}

/// All free coefficients: latent spline blocks (one row per process),
/// and per equation an intercept plus p component blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JadeState {
    pub latent: Array2<f64>,
    pub intercepts: Vec<f64>,
    /// `gamma[j][k]`: coefficients of process k's influence on equation j.
    pub gamma: Vec<Vec<Array1<f64>>>,
}

impl JadeState {
    pub fn zero_model(latent: Array2<f64>, block_len: usize) -> Self {
        let p = latent.nrows();
        Self {
            latent,
            intercepts: vec![0.0; p],
            gamma: (0..p).map(|_| (0..p).map(|_| Array1::zeros(block_len)).collect()).collect(),
        }
    }

    /// Nonzero-coefficient pattern of the component blocks.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        self.gamma
            .iter()
            .map(|row| row.iter().map(|b| b.iter().any(|&v| v != 0.0)).collect())
            .collect()
    }

    /// Nonzero scalar count over equation j's component blocks, intercept
    /// excluded.
    pub fn nonzero_count(&self, j: usize) -> usize {
        self.gamma[j].iter().map(|b| b.iter().filter(|&&v| v != 0.0).count()).sum()
    }
}

/// Objective value split into its three terms. Also the element type of
/// the per-update trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub nll: f64,
    pub fidelity: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Line-search outcome for one latent block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmijoOutcome {
    pub alpha: f64,
    pub backtracks: usize,
    /// True when the search ran out of backtracks; alpha is then 0 and
    /// the block stays unchanged.
    pub exhausted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Accepted step size per outer iteration and equation.
    pub step_sizes: Vec<Vec<f64>>,
    pub backtracks: Vec<Vec<usize>>,
    /// (outer, equation) pairs whose line search was exhausted.
    pub armijo_failures: Vec<(usize, usize)>,
    /// Certified subgradient residual per model round and equation.
    pub gamma_kkt: Vec<Vec<f64>>,
    /// (round, equation) pairs whose model solve hit the iteration cap.
    pub gamma_unconverged: Vec<(usize, usize)>,
    /// Subgradient residuals of the final model blocks, recorded before
    /// the identifiability centering.
    pub final_kkt: Vec<f64>,
    /// Smoothing parameter selected per process for the latent start.
    pub smoothing: Vec<f64>,
    pub outer_iterations: usize,
    pub converged_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state: JadeState,
    /// Objective after initialization and after every accepted block
    /// update, evaluated under the penalty weights in force at the time.
    /// Non-increasing.
    pub objective_trace: Vec<ObjectiveBreakdown>,
    pub adjacency: Vec<Vec<bool>>,
    pub selected_lambda_gamma: f64,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

/// Per-time sufficient statistics of one process's observations.
struct ObsStats {
    count: Vec<f64>,
    sum: Vec<f64>,
    rows: f64,
}

/// One dataset plus everything derived from it that fits reuse: bases,
/// the quadrature rule, design matrices, and the smoothed latent start.
pub struct Engine {
    dataset: Dataset,
    config: JadeConfig,
    psi: BSplineBasis,
    phi: TransformedBasis,
    quad_t: Vec<f64>,
    quad_w: Vec<f64>,
    /// Latent basis values at quadrature nodes, nodes x M.
    psi_q: Array2<f64>,
    /// Latent basis time-derivatives at quadrature nodes.
    dpsi_q: Array2<f64>,
    /// Latent basis values at observation times.
    psi_obs: Array2<f64>,
    obs: Vec<ObsStats>,
    init_latent: Array2<f64>,
    init_smoothing: Vec<f64>,
}

impl Engine {
    pub fn new(dataset: Dataset, config: JadeConfig) -> Result<Self, EngineError> {
        config.validate()?;
        dataset.validate()?;
        let n = dataset.n_times();
        let m = config.latent_dim.unwrap_or_else(|| ((n + 3) / 4 + 4).min(35));
        let psi = BSplineBasis::with_quantile_knots(3, m - 4, &dataset.times, dataset.t_span)?;
        let phi = TransformedBasis::new(BSplineBasis::uniform(3, 4, (0.0, 1.0))?)?;
        let (quad_t, quad_w) = trapezoid_rule(dataset.t_span.0, dataset.t_span.1, config.quad_nodes);
        let psi_q = psi.design_matrix(&quad_t, 0)?;
        let dpsi_q = psi.design_matrix(&quad_t, 1)?;
        let psi_obs = psi.design_matrix(&dataset.times, 0)?;

        let obs = dataset
            .processes
            .iter()
            .map(|rows| {
                let mut count = vec![0.0; n];
                let mut sum = vec![0.0; n];
                for o in rows {
                    count[o.time_idx] += 1.0;
                    sum[o.time_idx] += o.value;
                }
                ObsStats { count, sum, rows: rows.len() as f64 }
            })
            .collect();

        let grid = smooth::default_grid();
        let p = dataset.p();
        let mut init_latent = Array2::zeros((p, psi.len()));
        let mut init_smoothing = Vec::with_capacity(p);
        for j in 0..p {
            let fit = smooth::select_smoothing(
                &dataset.times,
                &dataset.processes[j],
                dataset.family,
                &psi,
                &grid,
            )
            .map_err(|source| EngineError::Init { process: j + 1, source })?;
            init_latent.row_mut(j).assign(&fit.coefficients);
            init_smoothing.push(fit.smoothing_parameter);
        }

        Ok(Self {
            dataset,
            config,
            psi,
            phi,
            quad_t,
            quad_w,
            psi_q,
            dpsi_q,
            psi_obs,
            obs,
            init_latent,
            init_smoothing,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &JadeConfig {
        &self.config
    }

    pub fn latent_basis(&self) -> &BSplineBasis {
        &self.psi
    }

    pub fn component_basis(&self) -> &TransformedBasis {
        &self.phi
    }

    pub fn quad_grid(&self) -> &[f64] {
        &self.quad_t
    }

    /// Latent coefficients produced by the per-process smoother; the
    /// starting point of every fit and the fixed curves of the baseline.
    pub fn initial_latent(&self) -> &Array2<f64> {
        &self.init_latent
    }

    pub fn smoothing_parameters(&self) -> &[f64] {
        &self.init_smoothing
    }

    pub fn block_len(&self) -> usize {
        self.phi.len()
    }

    /// A state with the smoothed latent start and an all-zero model.
    pub fn initial_state(&self) -> JadeState {
        JadeState::zero_model(self.init_latent.clone(), self.phi.len())
    }

    fn check_state(&self, state: &JadeState) -> Result<(), EngineError> {
        let p = self.dataset.p();
        let m = self.psi.len();
        let l = self.phi.len();
        let ok = state.latent.nrows() == p
            && state.latent.ncols() == m
            && state.intercepts.len() == p
            && state.gamma.len() == p
            && state.gamma.iter().all(|row| row.len() == p && row.iter().all(|b| b.len() == l));
        if ok {
            Ok(())
        } else {
            Err(EngineError::Dimension(p, m, l))
        }
    }

    /// Latent values at the quadrature nodes, p x nodes.
    fn latent_nodes(&self, state: &JadeState) -> Array2<f64> {
        state.latent.dot(&self.psi_q.t())
    }

    /// Latent time-derivatives at the quadrature nodes.
    fn latent_deriv_nodes(&self, state: &JadeState) -> Array2<f64> {
        state.latent.dot(&self.dpsi_q.t())
    }

    /// Warped component-basis values per process: tables[k] is nodes x L.
    fn phi_tables(&self, theta: &Array2<f64>) -> Vec<Array2<f64>> {
        let q = theta.ncols();
        let l = self.phi.len();
        (0..theta.nrows())
            .map(|k| {
                let mut table = Array2::zeros((q, l));
                let mut buf = vec![0.0; l];
                for qi in 0..q {
                    self.phi.eval_into(theta[(k, qi)], &mut buf);
                    table.row_mut(qi).assign(&Array1::from_vec(buf.clone()));
                }
                table
            })
            .collect()
    }

    /// Modeled derivative of each equation at the quadrature nodes.
    fn model_nodes(&self, state: &JadeState, tables: &[Array2<f64>]) -> Array2<f64> {
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let mut f = Array2::zeros((p, q));
        for j in 0..p {
            for qi in 0..q {
                let mut v = state.intercepts[j];
                for k in 0..p {
                    v += state.gamma[j][k].dot(&tables[k].row(qi));
                }
                f[(j, qi)] = v;
            }
        }
        f
    }

    fn residual_nodes(&self, state: &JadeState) -> Array2<f64> {
        let theta = self.latent_nodes(state);
        let tables = self.phi_tables(&theta);
        let deriv = self.latent_deriv_nodes(state);
        &deriv - &self.model_nodes(state, &tables)
    }

    /// Integral of each equation's squared derivative residual.
    pub fn residual_integrals(&self, state: &JadeState) -> Result<Vec<f64>, EngineError> {
        self.check_state(state)?;
        let resid = self.residual_nodes(state);
        Ok((0..resid.nrows())
            .map(|j| resid.row(j).iter().zip(&self.quad_w).map(|(r, w)| w * r * r).sum())
            .collect())
    }

    /// Average negative log-likelihood of process j at its observation
    /// rows.
    fn nll_one(&self, state: &JadeState, j: usize) -> f64 {
        let theta = self.psi_obs.dot(&state.latent.row(j));
        let stats = &self.obs[j];
        let mut acc = 0.0;
        for (i, &t) in theta.iter().enumerate() {
            if stats.count[i] > 0.0 {
                acc += stats.sum[i] * t - stats.count[i] * self.dataset.family.cumulant(t).b;
            }
        }
        -acc / stats.rows
    }

    /// Objective with unit penalty weights.
    pub fn objective(
        &self,
        state: &JadeState,
        lambda_gamma: f64,
    ) -> Result<ObjectiveBreakdown, EngineError> {
        self.objective_weighted(state, lambda_gamma, None)
    }

    /// Objective with explicit penalty weights per (equation, process)
    /// block; `None` means unit weights everywhere. Fits record their
    /// trace under the adaptive weights once those are frozen.
    pub fn objective_weighted(
        &self,
        state: &JadeState,
        lambda_gamma: f64,
        weights: Option<&[Vec<f64>]>,
    ) -> Result<ObjectiveBreakdown, EngineError> {
        self.check_state(state)?;
        let p = self.dataset.p();
        let nll: f64 = (0..p).map(|j| self.nll_one(state, j)).sum();
        let fidelity: f64 =
            self.config.lambda_theta * self.residual_integrals(state)?.iter().sum::<f64>();
        let mut penalty = 0.0;
        for j in 0..p {
            for k in 0..p {
                let norm = state.gamma[j][k].dot(&state.gamma[j][k]).sqrt();
                if norm > 0.0 {
                    let w = weights.map_or(1.0, |ws| ws[j][k]);
                    penalty += lambda_gamma * w * norm;
                }
            }
        }
        Ok(ObjectiveBreakdown { nll, fidelity, penalty, total: nll + fidelity + penalty })
    }

    /// Gradient of the smooth part (likelihood plus fidelity) with
    /// respect to equation j's latent coefficients.
    pub fn grad_s_c(&self, state: &JadeState, j: usize) -> Result<Array1<f64>, EngineError> {
        Ok(self.grad_and_curvature(state, j)?.0)
    }

    /// Gradient and the diagonal curvature estimate (likelihood curvature
    /// exact, fidelity curvature by the squared-Jacobian approximation),
    /// both before clipping.
    fn grad_and_curvature(
        &self,
        state: &JadeState,
        j: usize,
    ) -> Result<(Array1<f64>, Array1<f64>), EngineError> {
        self.check_state(state)?;
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let m = self.psi.len();
        let l = self.phi.len();
        let lt = self.config.lambda_theta;

        let theta = self.latent_nodes(state);
        let deriv = self.latent_deriv_nodes(state);
        let tables = self.phi_tables(&theta);
        let resid = &deriv - &self.model_nodes(state, &tables);

        // Chain-rule factor of process j's warped basis at each node.
        let mut chain = Array2::zeros((q, l));
        {
            let mut vals = vec![0.0; l];
            let mut der = vec![0.0; l];
            for qi in 0..q {
                self.phi.eval_with_chain_into(theta[(j, qi)], &mut vals, &mut der);
                chain.row_mut(qi).assign(&Array1::from_vec(der.clone()));
            }
        }

        // Per node: a_jp = gamma_{jp, j} . chain, its residual-weighted
        // sum, its square sum, and equation j's own coupling a_jj.
        let mut r_dot_a = vec![0.0; q];
        let mut a_sq = vec![0.0; q];
        let mut a_own = vec![0.0; q];
        for jp in 0..p {
            let block = &state.gamma[jp][j];
            if block.iter().all(|&v| v == 0.0) {
                continue;
            }
            for qi in 0..q {
                let a = block.dot(&chain.row(qi));
                r_dot_a[qi] += resid[(jp, qi)] * a;
                a_sq[qi] += a * a;
                if jp == j {
                    a_own[qi] = a;
                }
            }
        }

        let stats = &self.obs[j];
        let theta_obs = self.psi_obs.dot(&state.latent.row(j));
        let mut g = Array1::zeros(m);
        let mut h = Array1::zeros(m);
        for (i, &t) in theta_obs.iter().enumerate() {
            if stats.count[i] == 0.0 {
                continue;
            }
            let c = self.dataset.family.cumulant(t);
            let coef = (stats.sum[i] - stats.count[i] * c.b1) / stats.rows;
            let curv = stats.count[i] * c.b2 / stats.rows;
            for mi in 0..m {
                let b = self.psi_obs[(i, mi)];
                g[mi] -= coef * b;
                h[mi] += curv * b * b;
            }
        }
        for qi in 0..q {
            let w = self.quad_w[qi];
            let rj = resid[(j, qi)];
            for mi in 0..m {
                let bv = self.psi_q[(qi, mi)];
                let bd = self.dpsi_q[(qi, mi)];
                g[mi] += 2.0 * lt * w * (rj * bd - r_dot_a[qi] * bv);
                // (bd - a_jj bv)^2 + sum_{jp != j} (a_jp bv)^2
                h[mi] +=
                    2.0 * lt * w * (bd * bd - 2.0 * a_own[qi] * bd * bv + a_sq[qi] * bv * bv);
            }
        }
        Ok((g, h))
    }

    /// Scaled descent direction -g / clip(h, lo, hi) for equation j.
    pub fn direction_c(&self, state: &JadeState, j: usize) -> Result<Array1<f64>, EngineError> {
        let (g, h) = self.grad_and_curvature(state, j)?;
        let (lo, hi) = self.config.hessian_clip;
        Ok(Array1::from_iter(g.iter().zip(&h).map(|(gi, hi_v)| -gi / hi_v.clamp(lo, hi))))
    }

    /// Everything in the smooth objective that involves equation j's
    /// latent block, with the rest of the state folded into constants:
    /// per equation jp, partial = [jp != j] dtheta_jp - gamma_jp0
    /// - sum_{k != j} gamma_jpk . phi_k.
    fn c_partial(&self, state: &JadeState, j: usize) -> Array2<f64> {
        let theta = self.latent_nodes(state);
        let tables = self.phi_tables(&theta);
        let deriv = self.latent_deriv_nodes(state);
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let mut partial = Array2::zeros((p, q));
        for jp in 0..p {
            for qi in 0..q {
                let mut v = if jp != j { deriv[(jp, qi)] } else { 0.0 };
                v -= state.intercepts[jp];
                for k in 0..p {
                    if k != j {
                        v -= state.gamma[jp][k].dot(&tables[k].row(qi));
                    }
                }
                partial[(jp, qi)] = v;
            }
        }
        partial
    }

    /// Likelihood of process j plus the full fidelity term, evaluated at
    /// a candidate latent block via the precomputed partials.
    fn s_for_trial(
        &self,
        state: &JadeState,
        j: usize,
        partial: &Array2<f64>,
        candidate: &Array1<f64>,
    ) -> f64 {
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let l = self.phi.len();
        let lt = self.config.lambda_theta;

        let theta_j = self.psi_q.dot(candidate);
        let dtheta_j = self.dpsi_q.dot(candidate);
        let mut fid = 0.0;
        let mut phi_row = vec![0.0; l];
        for qi in 0..q {
            self.phi.eval_into(theta_j[qi], &mut phi_row);
            let w = self.quad_w[qi];
            for jp in 0..p {
                let mut r = partial[(jp, qi)];
                let block = &state.gamma[jp][j];
                for (b, ph) in block.iter().zip(&phi_row) {
                    r -= b * ph;
                }
                if jp == j {
                    r += dtheta_j[qi];
                }
                fid += w * r * r;
            }
        }

        let stats = &self.obs[j];
        let theta_obs = self.psi_obs.dot(candidate);
        let mut acc = 0.0;
        for (i, &t) in theta_obs.iter().enumerate() {
            if stats.count[i] > 0.0 {
                acc += stats.sum[i] * t - stats.count[i] * self.dataset.family.cumulant(t).b;
            }
        }
        -acc / stats.rows + lt * fid
    }

    /// Backtracking search along `direction` for equation j's latent
    /// block. Returns the accepted step without applying it.
    pub fn armijo_search(
        &self,
        state: &JadeState,
        j: usize,
        direction: &Array1<f64>,
    ) -> Result<ArmijoOutcome, EngineError> {
        let (g, h) = self.grad_and_curvature(state, j)?;
        let partial = self.c_partial(state, j);
        Ok(self.armijo_inner(state, j, direction, &g, &h, &partial))
    }

    fn armijo_inner(
        &self,
        state: &JadeState,
        j: usize,
        direction: &Array1<f64>,
        g: &Array1<f64>,
        h: &Array1<f64>,
        partial: &Array2<f64>,
    ) -> ArmijoOutcome {
        let a = self.config.armijo;
        let (lo, hi) = self.config.hessian_clip;
        if direction.iter().all(|&d| d == 0.0) {
            return ArmijoOutcome { alpha: a.alpha_init, backtracks: 0, exhausted: false };
        }
        // Acceptance slope g'd + kappa d'Hd with the clipped curvature.
        let mut slope = 0.0;
        for ((gi, hv), di) in g.iter().zip(h).zip(direction) {
            slope += gi * di + a.kappa * hv.clamp(lo, hi) * di * di;
        }
        let current = state.latent.row(j).to_owned();
        let s0 = self.s_for_trial(state, j, partial, &current);
        let mut alpha = a.alpha_init;
        for k in 0..MAX_BACKTRACKS {
            let candidate = &current + &(direction * alpha);
            let s = self.s_for_trial(state, j, partial, &candidate);
            if s <= s0 + alpha * a.zeta * slope {
                return ArmijoOutcome { alpha, backtracks: k, exhausted: false };
            }
            alpha *= a.eta;
        }
        ArmijoOutcome { alpha: 0.0, backtracks: MAX_BACKTRACKS, exhausted: true }
    }

    /// Weighted design of the model regression at the given latent
    /// values: shared Gram matrix, per-equation linear terms, and
    /// per-equation squared-response norms.
    fn gamma_normal_parts(
        &self,
        theta: &Array2<f64>,
        deriv: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Array1<f64>>, Vec<f64>) {
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let l = self.phi.len();
        let dim = 1 + p * l;
        let tables = self.phi_tables(theta);

        let mut xw = Array2::zeros((q, dim));
        for qi in 0..q {
            let sw = self.quad_w[qi].sqrt();
            xw[(qi, 0)] = sw;
            for k in 0..p {
                for a in 0..l {
                    xw[(qi, 1 + k * l + a)] = sw * tables[k][(qi, a)];
                }
            }
        }
        let gram = xw.t().dot(&xw);
        let mut lins = Vec::with_capacity(p);
        let mut ysqs = Vec::with_capacity(p);
        for j in 0..p {
            let resp: Array1<f64> = (0..q)
                .map(|qi| self.quad_w[qi].sqrt() * deriv[(j, qi)])
                .collect();
            lins.push(xw.t().dot(&resp));
            ysqs.push(resp.dot(&resp));
        }
        (gram, lins, ysqs)
    }

    fn state_as_solution(state: &JadeState, j: usize) -> GroupSolution {
        let blocks: Vec<Array1<f64>> = state.gamma[j].clone();
        let active = blocks.iter().map(|b| b.iter().any(|&v| v != 0.0)).collect();
        GroupSolution {
            intercept: state.intercepts[j],
            blocks,
            active,
            kkt_residual: f64::NAN,
            iterations: 0,
            converged: false,
        }
    }

    /// Exact minimization of one equation's model block, guarded so the
    /// returned point is never measurably worse than the current one.
    fn gamma_step(
        problem: &GroupProblem,
        current: &GroupSolution,
        start: &GroupSolution,
    ) -> GroupSolution {
        let sol = problem.solve_from(start);
        let f_cur = problem.objective(current.intercept, &current.blocks);
        let f_sol = problem.objective(sol.intercept, &sol.blocks);
        if f_sol > f_cur + 1e-12 * (1.0 + f_cur.abs()) {
            let mut keep = current.clone();
            keep.kkt_residual = problem.kkt_residual(&keep);
            keep.converged = false;
            keep
        } else {
            sol
        }
    }

    /// Smallest penalty level (in lambda_gamma units) at which every
    /// equation's model shrinks to an intercept, measured at the
    /// smoothed latent start.
    pub fn lambda_gamma_ceiling(&self) -> Result<f64, EngineError> {
        let state = self.initial_state();
        let theta = self.latent_nodes(&state);
        let deriv = self.latent_deriv_nodes(&state);
        let (gram, lins, ysqs) = self.gamma_normal_parts(&theta, &deriv);
        let p = self.dataset.p();
        let l = self.phi.len();
        let mut worst = 0.0f64;
        for j in 0..p {
            let problem = GroupProblem::from_gram(
                gram.clone(),
                lins[j].clone(),
                ysqs[j],
                l,
                vec![1.0; p],
                0.0,
            )?;
            worst = worst.max(problem.lambda_max()?);
        }
        Ok(2.0 * self.config.lambda_theta * worst)
    }

    /// Default tuning grid: 30 log-spaced penalty levels spanning three
    /// decades below the shrink-everything ceiling.
    pub fn default_tune_grid(&self) -> Result<Vec<f64>, EngineError> {
        let ceiling = self.lambda_gamma_ceiling()?;
        if !(ceiling > 0.0) {
            return Ok(vec![0.0]);
        }
        let lo = (1e-3 * ceiling).ln();
        let hi = ceiling.ln();
        Ok((0..30).map(|i| (lo + (hi - lo) * i as f64 / 29.0).exp()).collect())
    }

    /// Shift each component to mean zero over the quadrature nodes,
    /// moving the removed constants into the equation intercepts. The
    /// all-ones coefficient vector represents the constant function, so
    /// the shift is a uniform subtraction within each block. Predicted
    /// derivatives are unchanged; the map is idempotent.
    pub fn center(&self, state: &mut JadeState) -> Result<(), EngineError> {
        self.check_state(state)?;
        let p = self.dataset.p();
        let q = self.quad_t.len();
        let theta = self.latent_nodes(state);
        let tables = self.phi_tables(&theta);
        let means: Vec<Array1<f64>> = (0..p)
            .map(|k| {
                let mut bar = Array1::zeros(self.phi.len());
                for qi in 0..q {
                    bar += &tables[k].row(qi);
                }
                bar / q as f64
            })
            .collect();
        for j in 0..p {
            let mut shift = 0.0;
            for k in 0..p {
                let m = state.gamma[j][k].dot(&means[k]);
                if m != 0.0 {
                    state.gamma[j][k].mapv_inplace(|v| v - m);
                    shift += m;
                }
            }
            state.intercepts[j] += shift;
        }
        Ok(())
    }

    /// Tuning score of a finished fit: per-equation log residual
    /// integrals plus a sparsity term that charges log(n)/n per nonzero
    /// model coefficient.
    ///
    /// The residuals are evaluated with the fitted model plugged into the
    /// data-driven initial latent curves, not the fit's own curves. Scores
    /// are comparable across penalty levels only if every candidate is
    /// measured against the same latent frame; a heavily penalized fit can
    /// otherwise flatten its curves until an empty model looks exact.
    pub fn model_score(&self, fit: &FitResult) -> Result<f64, EngineError> {
        let mut frame = self.initial_state();
        frame.intercepts = fit.state.intercepts.clone();
        frame.gamma = fit.state.gamma.clone();
        let resid = self.residual_integrals(&frame)?;
        let n = self.dataset.n_times() as f64;
        let p = self.dataset.p();
        let mut score = 0.0;
        for j in 0..p {
            score += resid[j].max(RESIDUAL_FLOOR).ln();
            score += fit.state.nonzero_count(j) as f64 * n.ln() / n;
        }
        Ok(score)
    }

    /// Joint fit at the configured penalty; "auto" tunes over the
    /// default grid first.
    pub fn fit(&self) -> Result<FitResult, EngineError> {
        self.fit_init(None)
    }

    /// Joint fit starting from the latent coefficients of `init` instead
    /// of the smoothed curves. The model always starts at zero.
    pub fn fit_init(&self, init: Option<&JadeState>) -> Result<FitResult, EngineError> {
        match self.config.lambda_gamma {
            LambdaGamma::Value(v) => self.fit_at(v, Method::Jade, init),
            LambdaGamma::Auto => {
                let grid = self.default_tune_grid()?;
                Ok(self.tune_init(&grid, Method::Jade, init)?.1)
            }
        }
    }

    /// Baseline: latent curves fixed at the smoother output, one model
    /// round, centering.
    pub fn fit_two_stage(&self) -> Result<FitResult, EngineError> {
        match self.config.lambda_gamma {
            LambdaGamma::Value(v) => self.fit_at(v, Method::TwoStage, None),
            LambdaGamma::Auto => {
                let grid = self.default_tune_grid()?;
                Ok(self.tune_init(&grid, Method::TwoStage, None)?.1)
            }
        }
    }

    /// One fit per grid value, in grid order. The fits are independent
    /// and run concurrently.
    pub fn fits_over(&self, grid: &[f64], method: Method) -> Result<Vec<FitResult>, EngineError> {
        self.fits_over_init(grid, method, None)
    }

    fn fits_over_init(
        &self,
        grid: &[f64],
        method: Method,
        init: Option<&JadeState>,
    ) -> Result<Vec<FitResult>, EngineError> {
        grid.par_iter().map(|&lg| self.fit_at(lg, method, init)).collect()
    }

    /// Index of the winning tuning score: strictly smaller wins, first
    /// entry on ties.
    pub fn best_index(scores: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_score = f64::INFINITY;
        for (i, &score) in scores.iter().enumerate() {
            if score < best_score {
                best_score = score;
                best = i;
            }
        }
        best
    }

    /// Fit at every grid value and keep the best tuning score (strictly
    /// smaller wins, first on ties). Grid fits are independent and run
    /// concurrently.
    pub fn tune(&self, grid: &[f64], method: Method) -> Result<(f64, FitResult), EngineError> {
        self.tune_init(grid, method, None)
    }

    fn tune_init(
        &self,
        grid: &[f64],
        method: Method,
        init: Option<&JadeState>,
    ) -> Result<(f64, FitResult), EngineError> {
        if grid.is_empty() {
            return Err(EngineError::EmptyGrid);
        }
        let fits = self.fits_over_init(grid, method, init)?;
        let scores = fits
            .iter()
            .map(|f| self.model_score(f))
            .collect::<Result<Vec<f64>, EngineError>>()?;
        let best = Self::best_index(&scores);
        let lambda = grid[best];
        let fit = fits.into_iter().nth(best).expect("scores and fits are parallel");
        Ok((lambda, fit))
    }

    fn fit_at(
        &self,
        lambda_gamma: f64,
        method: Method,
        init: Option<&JadeState>,
    ) -> Result<FitResult, EngineError> {
        if !(lambda_gamma >= 0.0) || !lambda_gamma.is_finite() {
            return Err(EngineError::Config(
                "lambda_gamma must be nonnegative and finite".to_string(),
            ));
        }
        let p = self.dataset.p();
        let l = self.phi.len();
        let lambda_eff = lambda_gamma / (2.0 * self.config.lambda_theta);

        let mut state = match init {
            Some(given) => {
                self.check_state(given)?;
                JadeState::zero_model(given.latent.clone(), l)
            }
            None => self.initial_state(),
        };
        // Adaptive penalty weights, frozen after the first model round.
        let mut weights: Option<Vec<Vec<f64>>> = None;
        let mut trace = vec![self.objective_weighted(&state, lambda_gamma, None)?];
        let mut diag = Diagnostics {
            smoothing: self.init_smoothing.clone(),
            ..Diagnostics::default()
        };
        let mut last_active: Vec<Vec<bool>> = vec![vec![false; p]; p];
        let mut last_kkt = vec![0.0; p];

        // The model blocks are initialized by their exact conditional
        // update at the initial latent curves, which is the two-stage
        // estimate. Starting the first latent step from a fitted model
        // matters: against an all-zero model the fidelity term pulls
        // every curve toward a constant instead of toward the dynamics.
        self.model_round(
            &mut state,
            &mut weights,
            &mut trace,
            &mut diag,
            &mut last_active,
            &mut last_kkt,
            lambda_gamma,
            lambda_eff,
            0,
        )?;
        let mut q_prev = trace.last().expect("trace nonempty").total;

        if method == Method::Jade {
            for outer in 1..=self.config.max_outer {
                let mut alphas = Vec::with_capacity(p);
                let mut backs = Vec::with_capacity(p);
                for j in 0..p {
                    let (g, h) = self.grad_and_curvature(&state, j)?;
                    let (lo, hi) = self.config.hessian_clip;
                    let d = Array1::from_iter(
                        g.iter().zip(&h).map(|(gi, hv)| -gi / hv.clamp(lo, hi)),
                    );
                    let partial = self.c_partial(&state, j);
                    let outcome = self.armijo_inner(&state, j, &d, &g, &h, &partial);
                    if outcome.exhausted {
                        diag.armijo_failures.push((outer, j));
                    } else if outcome.alpha > 0.0 && d.iter().any(|&v| v != 0.0) {
                        let step = &d * outcome.alpha;
                        let mut row = state.latent.row_mut(j);
                        row += &step.view();
                    }
                    alphas.push(outcome.alpha);
                    backs.push(outcome.backtracks);
                    trace.push(self.objective_weighted(
                        &state,
                        lambda_gamma,
                        weights.as_deref(),
                    )?);
                }
                diag.step_sizes.push(alphas);
                diag.backtracks.push(backs);

                self.model_round(
                    &mut state,
                    &mut weights,
                    &mut trace,
                    &mut diag,
                    &mut last_active,
                    &mut last_kkt,
                    lambda_gamma,
                    lambda_eff,
                    outer,
                )?;

                let q_now = trace.last().expect("trace nonempty").total;
                if (q_prev - q_now).abs() <= self.config.tol * q_prev.abs().max(1.0) {
                    diag.converged_early = true;
                    break;
                }
                q_prev = q_now;
            }
        }

        diag.final_kkt = last_kkt;
        self.center(&mut state)?;
        Ok(FitResult {
            state,
            objective_trace: trace,
            adjacency: last_active,
            selected_lambda_gamma: lambda_gamma,
            method,
            diagnostics: diag,
        })
    }

    /// One exact model update per equation at the current latent curves,
    /// sharing the Gram matrix of the common design. Blocks are disjoint,
    /// so the per-equation solves are independent.
    ///
    /// The first round solves an unweighted pilot and freezes the adaptive
    /// penalty weights derived from it; later rounds warm-start from the
    /// current blocks under the frozen weights.
    #[allow(clippy::too_many_arguments)]
    fn model_round(
        &self,
        state: &mut JadeState,
        weights: &mut Option<Vec<Vec<f64>>>,
        trace: &mut Vec<ObjectiveBreakdown>,
        diag: &mut Diagnostics,
        last_active: &mut [Vec<bool>],
        last_kkt: &mut [f64],
        lambda_gamma: f64,
        lambda_eff: f64,
        round: usize,
    ) -> Result<(), EngineError> {
        let p = self.dataset.p();
        let l = self.phi.len();
        let theta = self.latent_nodes(state);
        let deriv = self.latent_deriv_nodes(state);
        let (gram, lins, ysqs) = self.gamma_normal_parts(&theta, &deriv);

        let first_round = weights.is_none();
        let shared_weights = weights.as_ref();
        let snapshot = &*state;
        let solutions: Result<Vec<(GroupSolution, Vec<f64>)>, EngineError> = (0..p)
            .into_par_iter()
            .map(|j| {
                let current = Self::state_as_solution(snapshot, j);
                let (w, start) = if first_round {
                    let pilot_problem = GroupProblem::from_gram(
                        gram.clone(),
                        lins[j].clone(),
                        ysqs[j],
                        l,
                        vec![1.0; p],
                        lambda_eff,
                    )?;
                    let pilot = pilot_problem.solve();
                    (adaptive_weights(&pilot, self.config.nu), pilot)
                } else {
                    (shared_weights.expect("frozen weights")[j].clone(), current.clone())
                };
                let problem = GroupProblem::from_gram(
                    gram.clone(),
                    lins[j].clone(),
                    ysqs[j],
                    l,
                    w.clone(),
                    lambda_eff,
                )?;
                Ok((Self::gamma_step(&problem, &current, &start), w))
            })
            .collect();
        let solutions = solutions?;

        if first_round {
            *weights = Some(solutions.iter().map(|(_, w)| w.clone()).collect());
        }
        let mut round_kkt = Vec::with_capacity(p);
        for (j, (sol, _)) in solutions.into_iter().enumerate() {
            state.intercepts[j] = sol.intercept;
            last_active[j] = sol.active.clone();
            state.gamma[j] = sol.blocks;
            round_kkt.push(sol.kkt_residual);
            last_kkt[j] = sol.kkt_residual;
            if !sol.converged {
                diag.gamma_unconverged.push((round, j));
            }
            trace.push(self.objective_weighted(
                state,
                lambda_gamma,
                weights.as_deref(),
            )?);
        }
        diag.gamma_kkt.push(round_kkt);
        diag.outer_iterations = round + 1;
        Ok(())
    }

    /// Latent values of process j at arbitrary times.
    pub fn latent_curve(
        &self,
        state: &JadeState,
        j: usize,
        times: &[f64],
    ) -> Result<Vec<f64>, EngineError> {
        self.check_state(state)?;
        let design = self.psi.design_matrix(times, 0)?;
        Ok(design.dot(&state.latent.row(j)).to_vec())
    }

    /// Latent time-derivatives of process j at arbitrary times.
    pub fn latent_deriv_curve(
        &self,
        state: &JadeState,
        j: usize,
        times: &[f64],
    ) -> Result<Vec<f64>, EngineError> {
        self.check_state(state)?;
        let design = self.psi.design_matrix(times, 1)?;
        Ok(design.dot(&state.latent.row(j)).to_vec())
    }

    /// Modeled derivative of equation j at arbitrary times: intercept
    /// plus every component evaluated at the fitted latent values.
    pub fn derivative_curve(
        &self,
        state: &JadeState,
        j: usize,
        times: &[f64],
    ) -> Result<Vec<f64>, EngineError> {
        self.check_state(state)?;
        let design = self.psi.design_matrix(times, 0)?;
        let p = self.dataset.p();
        let l = self.phi.len();
        let mut out = Vec::with_capacity(times.len());
        let mut buf = vec![0.0; l];
        for row in 0..times.len() {
            let mut v = state.intercepts[j];
            for k in 0..p {
                let theta_k = design.row(row).dot(&state.latent.row(k));
                self.phi.eval_into(theta_k, &mut buf);
                v += state.gamma[j][k].dot(&Array1::from_vec(buf.clone()));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Component function of (equation j, process k) on a grid of latent
    /// values.
    pub fn component_curve(
        &self,
        state: &JadeState,
        j: usize,
        k: usize,
        thetas: &[f64],
    ) -> Result<Vec<f64>, EngineError> {
        self.check_state(state)?;
        let mut buf = vec![0.0; self.phi.len()];
        Ok(thetas
            .iter()
            .map(|&t| {
                self.phi.eval_into(t, &mut buf);
                state.gamma[j][k].dot(&Array1::from_vec(buf.clone()))
            })
            .collect())
    }
}
