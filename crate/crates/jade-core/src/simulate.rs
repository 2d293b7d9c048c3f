//! Ground-truth generator: a ten-process cubic ODE network, a fixed-step
//! RK4 integrator, per-family affine rescaling, and noisy observation
//! sampling.
//!
//! The raw network couples six processes in pairs through cubic terms and
//! drifts four more linearly with random slopes. Accepted draws keep the
//! raw solution inside [-50, 50] on the full horizon. Each observation
//! family then rescales every trajectory into a range where its link is
//! informative (positive for Poisson intensities, centered for Bernoulli
//! logits) before noise is added.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Obs};
use crate::expfam::Family;

pub const DEFAULT_T_SPAN: (f64, f64) = (0.0, 20.0);
pub const DEFAULT_STEP: f64 = 0.01;

/// Raw trajectories outside this band reject the parameter draw.
const BLOWUP: f64 = 50.0;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("step must be positive, finite, and divide the time span")]
    BadStep,
    #[error("state dimension mismatch")]
    DimensionMismatch,
    #[error("solution became non-finite during integration")]
    NonFinite,
    #[error("no stable parameter draw found in {0} attempts")]
    RejectionExhausted(usize),
    #[error("rescaling is degenerate for process {process}: trajectory range is {range}")]
    DegenerateRange { process: usize, range: f64 },
    #[error("gaussian sampling needs a positive signal-to-noise ratio")]
    MissingSnr,
    #[error("need at least two observation times, got {0}")]
    TooFewTimes(usize),
    #[error("replicate count must be positive")]
    NoReplicates,
    #[error("poisson intensity overflows for process {process} (latent value {value})")]
    IntensityOverflow { process: usize, value: f64 },
}

/// Observation regime: family plus the rescaling and replication scheme
/// that keeps that family's data informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Gaussian,
    Poisson,
    Binomial,
}

impl Preset {
    pub fn family(self) -> Family {
        match self {
            Preset::Gaussian => Family::Gaussian,
            Preset::Poisson => Family::Poisson,
            Preset::Binomial => Family::Binomial { trials: 1 },
        }
    }

    /// Replicates compensate the information content of one observation:
    /// one Gaussian row, ten Poisson counts, forty binary outcomes.
    pub fn default_replicates(self) -> usize {
        match self {
            Preset::Gaussian => 1,
            Preset::Poisson => 10,
            Preset::Binomial => 40,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Gaussian => "gaussian",
            Preset::Poisson => "poisson",
            Preset::Binomial => "binomial",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Preset::Gaussian),
            "poisson" => Ok(Preset::Poisson),
            "binomial" | "bernoulli" => Ok(Preset::Binomial),
            other => Err(format!("unknown family preset: {other}")),
        }
    }
}

/// Complete description of one simulated truth: the cubic network, the
/// accepted initial state, and the per-process affine rescaling
/// `scaled = (raw - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub p: usize,
    pub t_span: (f64, f64),
    pub family: Family,
    pub seed: u64,
    /// Constant drift of each raw equation.
    pub intercepts: Vec<f64>,
    /// `triples[j][k]` holds the raw cubic coefficients of process k's
    /// influence on equation j, as multipliers of (x, x^2, x^3).
    pub triples: Vec<Vec<[f64; 3]>>,
    /// Per-process `(scale, shift)` applied to the raw solution.
    pub rescale: Vec<(f64, f64)>,
    pub init: Vec<f64>,
}

/// Solution on a uniform grid: `values[(j, i)]` is process j at `t[i]`,
/// `derivs` the corresponding time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub values: Array2<f64>,
    pub derivs: Array2<f64>,
}

impl Trajectory {
    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    fn interp(&self, row: ndarray::ArrayView1<f64>, t: f64) -> f64 {
        let ts = &self.t;
        if t <= ts[0] {
            return row[0];
        }
        if t >= *ts.last().unwrap() {
            return row[ts.len() - 1];
        }
        let i = match ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return row[i],
            Err(i) => i,
        };
        let w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
        row[i - 1] * (1.0 - w) + row[i] * w
    }

    /// Linear interpolation of process j at time t (clamped to the grid).
    pub fn value_at(&self, j: usize, t: f64) -> f64 {
        self.interp(self.values.row(j), t)
    }

    pub fn deriv_at(&self, j: usize, t: f64) -> f64 {
        self.interp(self.derivs.row(j), t)
    }

    /// Population variance of process j over the grid.
    pub fn variance(&self, j: usize) -> f64 {
        let row = self.values.row(j);
        let n = row.len() as f64;
        let mean = row.sum() / n;
        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

fn rhs_into(intercepts: &[f64], triples: &[Vec<[f64; 3]>], state: &[f64], out: &mut [f64]) {
    let p = state.len();
    for j in 0..p {
        let mut acc = intercepts[j];
        for k in 0..p {
            let [c1, c2, c3] = triples[j][k];
            if c1 != 0.0 || c2 != 0.0 || c3 != 0.0 {
                let x = state[k];
                acc += x * (c1 + x * (c2 + x * c3));
            }
        }
        out[j] = acc;
    }
}

/// Classic fourth-order Runge-Kutta with a fixed step that must divide
/// the span. Returns the solution and the vector field along it.
pub fn rk4_solve(
    intercepts: &[f64],
    triples: &[Vec<[f64; 3]>],
    init: &[f64],
    t_span: (f64, f64),
    step: f64,
) -> Result<Trajectory, SimulateError> {
    let p = init.len();
    if intercepts.len() != p || triples.len() != p || triples.iter().any(|r| r.len() != p) {
        return Err(SimulateError::DimensionMismatch);
    }
    let (lo, hi) = t_span;
    if !(step > 0.0) || !step.is_finite() || hi <= lo {
        return Err(SimulateError::BadStep);
    }
    let steps_f = (hi - lo) / step;
    let n_steps = steps_f.round() as usize;
    if n_steps == 0 || (steps_f - n_steps as f64).abs() > 1e-8 * steps_f.max(1.0) {
        return Err(SimulateError::BadStep);
    }

    let len = n_steps + 1;
    let mut t = Vec::with_capacity(len);
    let mut values = Array2::zeros((p, len));
    let mut derivs = Array2::zeros((p, len));

    let mut state = init.to_vec();
    let mut k1 = vec![0.0; p];
    let mut k2 = vec![0.0; p];
    let mut k3 = vec![0.0; p];
    let mut k4 = vec![0.0; p];
    let mut stage = vec![0.0; p];

    for i in 0..len {
        let ti = if i == n_steps { hi } else { lo + i as f64 * step };
        t.push(ti);
        rhs_into(intercepts, triples, &state, &mut k1);
        for j in 0..p {
            values[(j, i)] = state[j];
            derivs[(j, i)] = k1[j];
        }
        if i == n_steps {
            break;
        }

        for j in 0..p {
            stage[j] = state[j] + 0.5 * step * k1[j];
        }
        rhs_into(intercepts, triples, &stage, &mut k2);
        for j in 0..p {
            stage[j] = state[j] + 0.5 * step * k2[j];
        }
        rhs_into(intercepts, triples, &stage, &mut k3);
        for j in 0..p {
            stage[j] = state[j] + step * k3[j];
        }
        rhs_into(intercepts, triples, &stage, &mut k4);
        for j in 0..p {
            state[j] += step / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            if !state[j].is_finite() {
                return Err(SimulateError::NonFinite);
            }
        }
    }

    Ok(Trajectory { t, values, derivs })
}

/// The built-in ten-process network: six processes coupled in pairs by
/// cubic terms, four pure drifts whose slopes are drawn at build time.
/// Returns (fixed intercepts, triples); drift intercepts start at zero.
pub fn preset_network() -> (Vec<f64>, Vec<Vec<[f64; 3]>>) {
    let p = 10;
    let intercepts = vec![0.0, 0.4, -0.2, -0.2, 0.05, -0.05, 0.0, 0.0, 0.0, 0.0];
    let mut triples = vec![vec![[0.0; 3]; p]; p];
    triples[0][0] = [1.2, 0.3, -0.6];
    triples[0][1] = [0.1, 0.2, 0.2];
    triples[1][0] = [-2.0, 0.0, 0.4];
    triples[1][1] = [0.5, 0.2, -0.3];
    triples[2][3] = [-0.3, 0.4, 0.1];
    triples[3][2] = [0.2, -0.1, -0.2];
    triples[4][5] = [0.1, 0.0, -0.8];
    triples[5][4] = [0.0, 0.0, 0.5];
    (intercepts, triples)
}

fn rescale_for(preset: Preset, raw: &Trajectory) -> Result<Vec<(f64, f64)>, SimulateError> {
    let p = raw.p();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let row = raw.values.row(j);
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pair = match preset {
            Preset::Gaussian => (1.0, 0.0),
            // Positive floors so log intensities stay well away from zero;
            // the paired cubic processes 3 and 4 get a gentler slope.
            Preset::Poisson => match j {
                2 | 3 => (1.5, lo - 1.0),
                6..=9 => (1.0, lo - 0.1),
                _ => (1.0, lo - 1.0),
            },
            // Center the range on zero and squash it into [-2.5, 2.5]
            // so success probabilities sweep most of (0, 1).
            Preset::Binomial => {
                let range = hi - lo;
                if range <= 1e-12 {
                    return Err(SimulateError::DegenerateRange { process: j + 1, range });
                }
                (0.2 * range, 0.5 * (lo + hi))
            }
        };
        out.push(pair);
    }
    Ok(out)
}

impl TruthSpec {
    /// Edge (j, k): process k enters equation j with a nonzero cubic term.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        self.triples
            .iter()
            .map(|row| row.iter().map(|t| t.iter().any(|&c| c != 0.0)).collect())
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency()
            .iter()
            .map(|r| r.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Intercept of equation j in rescaled coordinates.
    pub fn rescaled_intercept(&self, j: usize) -> f64 {
        self.intercepts[j] / self.rescale[j].0
    }

    /// Coefficients [c0, c1, c2, c3] of process k's contribution to the
    /// rescaled equation j as a polynomial in the rescaled state u:
    /// contribution(u) = c0 + c1 u + c2 u^2 + c3 u^3.
    ///
    /// Derived by substituting raw = scale_k * u + shift_k into the raw
    /// cubic and dividing by scale_j (the chain factor of the rescaled
    /// derivative).
    pub fn component_poly(&self, j: usize, k: usize) -> [f64; 4] {
        let [c1, c2, c3] = self.triples[j][k];
        let (a, b) = self.rescale[k];
        let aj = self.rescale[j].0;
        [
            (c1 * b + c2 * b * b + c3 * b * b * b) / aj,
            (c1 * a + 2.0 * c2 * a * b + 3.0 * c3 * a * b * b) / aj,
            (c2 * a * a + 3.0 * c3 * a * a * b) / aj,
            c3 * a * a * a / aj,
        ]
    }

    /// Integrate the raw network from the stored initial state.
    pub fn solve_raw(&self, step: f64) -> Result<Trajectory, SimulateError> {
        rk4_solve(&self.intercepts, &self.triples, &self.init, self.t_span, step)
    }

    /// Integrate and apply the per-process rescaling to values and
    /// derivatives.
    pub fn solve(&self, step: f64) -> Result<Trajectory, SimulateError> {
        let mut traj = self.solve_raw(step)?;
        for j in 0..self.p {
            let (a, b) = self.rescale[j];
            for v in traj.values.row_mut(j) {
                *v = (*v - b) / a;
            }
            for d in traj.derivs.row_mut(j) {
                *d /= a;
            }
        }
        Ok(traj)
    }
}

/// Draw a stable truth for the given preset. Slopes of the four drift
/// processes come from N(0, 1) and the initial state from U[-1, 1]^10;
/// draws whose raw solution leaves [-50, 50] are rejected and redrawn
/// wholesale, so acceptance is a property of the complete draw.
pub fn build_truth(preset: Preset, seed: u64) -> Result<TruthSpec, SimulateError> {
    let (base_intercepts, triples) = preset_network();
    let p = base_intercepts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..MAX_ATTEMPTS {
        let mut intercepts = base_intercepts.clone();
        for b in intercepts.iter_mut().skip(6) {
            *b = StandardNormal.sample(&mut rng);
        }
        let init: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();

        let raw = match rk4_solve(&intercepts, &triples, &init, DEFAULT_T_SPAN, DEFAULT_STEP) {
            Ok(t) => t,
            Err(SimulateError::NonFinite) => continue,
            Err(e) => return Err(e),
        };
        let bounded = raw.values.iter().all(|v| v.abs() <= BLOWUP);
        if !bounded {
            continue;
        }

        let rescale = rescale_for(preset, &raw)?;
        return Ok(TruthSpec {
            p,
            t_span: DEFAULT_T_SPAN,
            family: preset.family(),
            seed,
            intercepts,
            triples: triples.clone(),
            rescale,
            init,
        });
    }
    Err(SimulateError::RejectionExhausted(MAX_ATTEMPTS))
}

/// Sample a dataset from a rescaled trajectory: n evenly spaced times
/// over the trajectory span, `replicates` independent rows per (process,
/// time). Gaussian noise variance is Var(process) / snr, so `snr` is
/// required (infinite snr yields noiseless data). Returns the dataset
/// and, for Gaussian data, the per-process noise standard deviations.
pub fn sample_dataset(
    traj: &Trajectory,
    family: Family,
    n: usize,
    replicates: usize,
    snr: Option<f64>,
    seed: u64,
) -> Result<(Dataset, Option<Vec<f64>>), SimulateError> {
    if n < 2 {
        return Err(SimulateError::TooFewTimes(n));
    }
    if replicates == 0 {
        return Err(SimulateError::NoReplicates);
    }
    let p = traj.p();
    let (lo, hi) = (traj.t[0], *traj.t.last().unwrap());
    let times: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();

    let noise_sd = match family {
        Family::Gaussian => {
            let snr = snr.ok_or(SimulateError::MissingSnr)?;
            if !(snr > 0.0) {
                return Err(SimulateError::MissingSnr);
            }
            Some((0..p).map(|j| (traj.variance(j) / snr).sqrt()).collect::<Vec<f64>>())
        }
        _ => None,
    };

    // Observation noise gets its own stream so it never replays the
    // parameter draws made from the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut processes = Vec::with_capacity(p);
    for j in 0..p {
        let mut rows = Vec::with_capacity(n * replicates);
        for (i, &t) in times.iter().enumerate() {
            let theta = traj.value_at(j, t);
            if matches!(family, Family::Poisson) && !theta.exp().is_finite() {
                return Err(SimulateError::IntensityOverflow { process: j + 1, value: theta });
            }
            for r in 0..replicates {
                let value = match family {
                    Family::Gaussian => {
                        let sd = noise_sd.as_ref().unwrap()[j];
                        let z: f64 = StandardNormal.sample(&mut rng);
                        theta + sd * z
                    }
                    _ => family.sample(theta, &mut rng),
                };
                rows.push(Obs { time_idx: i, replicate: r as u32, value });
            }
        }
        processes.push(rows);
    }

    let dataset = Dataset { times, t_span: (lo, hi), family, processes };
    debug_assert!(dataset.validate().is_ok());
    Ok((dataset, noise_sd))
}
