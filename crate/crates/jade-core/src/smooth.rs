//! Penalized likelihood smoothing of one observation row onto a spline
//! basis: damped Newton on nll(c) + lambda * c' Omega c, with GCV-based
//! selection of the smoothing parameter.
//!
//! Replicated rows are collapsed to per-time sufficient statistics
//! (count, sum, sum of squares) before fitting; values are summed in a
//! canonical order, so the result is bit-identical under any row
//! permutation.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::basis::BSplineBasis;
use crate::data::Obs;
use crate::expfam::Family;
use crate::linalg::{solve_sym, solve_sym_many};

const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 70;
const REL_TOL: f64 = 1e-10;
/// Curvature floor for working weights so flat-likelihood regions
/// (saturated logits, near-zero intensities) stay invertible.
const WEIGHT_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("smoothing parameter must be positive and finite")]
    BadLambda,
    #[error("no observations to smooth")]
    Empty,
    #[error("observation value is not finite")]
    NonFiniteValue,
    #[error("time index out of range")]
    BadTimeIndex,
    #[error("{distinct} distinct time points cannot support {m} basis functions")]
    TooFewDistinctTimes { distinct: usize, m: usize },
    #[error("penalized system is rank deficient")]
    RankDeficient,
    #[error("Newton iteration did not converge in {0} steps")]
    NonConvergence(usize),
    #[error("basis error: {0}")]
    Basis(#[from] crate::basis::BasisError),
    #[error("smoothing grid is empty")]
    EmptyGrid,
    #[error("no smoothing grid value produced a converged fit")]
    AllGridPointsFailed,
}

/// A converged penalized fit for one process.
#[derive(Debug, Clone)]
pub struct SmoothFit {
    pub coefficients: Array1<f64>,
    pub smoothing_parameter: f64,
    pub gcv_score: f64,
    /// Final penalized objective value.
    pub objective: f64,
    /// Objective after each accepted Newton step, starting at the
    /// initializer. Non-increasing.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Per-time sufficient statistics: replicated exponential-family rows
/// with a common latent value collapse to (count, sum, sum of squares)
/// without changing the likelihood.
struct Collapsed {
    times: Vec<f64>,
    count: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n_rows: f64,
}

fn collapse(grid: &[f64], rows: &[Obs]) -> Result<Collapsed, SmoothError> {
    if rows.is_empty() {
        return Err(SmoothError::Empty);
    }
    let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(rows.len());
    for o in rows {
        if o.time_idx >= grid.len() {
            return Err(SmoothError::BadTimeIndex);
        }
        if !o.value.is_finite() {
            return Err(SmoothError::NonFiniteValue);
        }
        pairs.push((o.time_idx, o.value));
    }
    // Canonical accumulation order makes the fit independent of row order.
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut out = Collapsed {
        times: Vec::new(),
        count: Vec::new(),
        sum: Vec::new(),
        sum_sq: Vec::new(),
        n_rows: rows.len() as f64,
    };
    for (idx, v) in pairs {
        if out.times.last() != Some(&grid[idx]) {
            out.times.push(grid[idx]);
            out.count.push(0.0);
            out.sum.push(0.0);
            out.sum_sq.push(0.0);
        }
        let last = out.count.len() - 1;
        out.count[last] += 1.0;
        out.sum[last] += v;
        out.sum_sq[last] += v * v;
    }
    Ok(out)
}

/// Starting latent values on the observed times: the standard generalized
/// linear model initializer. Working from the link-scale data mean avoids
/// the enormous first working response a zero start produces for counts.
fn initial_eta(family: Family, stats: &Collapsed) -> Vec<f64> {
    stats
        .sum
        .iter()
        .zip(&stats.count)
        .map(|(&s, &n)| {
            let mean = s / n;
            match family {
                Family::Gaussian => mean,
                Family::Poisson => (mean + 0.5).ln(),
                Family::Binomial { trials } => {
                    let m = trials as f64;
                    let p = (mean + 0.5) / (m + 1.0);
                    (p / (1.0 - p)).ln()
                }
            }
        })
        .collect()
}

struct Objective<'a> {
    family: Family,
    stats: &'a Collapsed,
    psi: Array2<f64>,
    omega: Array2<f64>,
    lambda: f64,
}

impl Objective<'_> {
    fn theta(&self, c: &Array1<f64>) -> Array1<f64> {
        self.psi.dot(c)
    }

    /// nll + lambda c' Omega c; +inf when the cumulant overflows.
    fn value(&self, c: &Array1<f64>) -> f64 {
        let theta = self.theta(c);
        let mut nll = 0.0;
        for (i, &t) in theta.iter().enumerate() {
            let b = self.family.cumulant(t).b;
            nll -= self.stats.sum[i] * t - self.stats.count[i] * b;
        }
        nll /= self.stats.n_rows;
        let pen = self.lambda * c.dot(&self.omega.dot(c));
        let v = nll + pen;
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    /// Gradient and Hessian of the penalized objective at c, with the
    /// curvature floor applied to the likelihood weights.
    fn grad_hess(&self, c: &Array1<f64>) -> (Array1<f64>, Array2<f64>) {
        let m = self.psi.ncols();
        let theta = self.theta(c);
        let mut grad = Array1::zeros(m);
        let mut hess = Array2::zeros((m, m));
        for (i, &t) in theta.iter().enumerate() {
            let cum = self.family.cumulant(t);
            let resid = self.stats.sum[i] - self.stats.count[i] * cum.b1;
            let w = (self.stats.count[i] * cum.b2).max(WEIGHT_FLOOR);
            let row = self.psi.row(i);
            for a in 0..m {
                grad[a] -= resid * row[a] / self.stats.n_rows;
                for b in a..m {
                    hess[(a, b)] += w * row[a] * row[b] / self.stats.n_rows;
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        grad += &(&self.omega.dot(c) * (2.0 * self.lambda));
        hess += &(&self.omega * (2.0 * self.lambda));
        (grad, hess)
    }
}

/// Minimize nll + lambda c' Omega c over spline coefficients by damped
/// Newton steps; converged when the relative objective change drops
/// below 1e-10.
pub fn fit_penalized(
    grid: &[f64],
    rows: &[Obs],
    family: Family,
    basis: &BSplineBasis,
    lambda: f64,
) -> Result<SmoothFit, SmoothError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(SmoothError::BadLambda);
    }
    let stats = collapse(grid, rows)?;
    let m = basis.len();
    if 2 * stats.times.len() < m {
        return Err(SmoothError::TooFewDistinctTimes { distinct: stats.times.len(), m });
    }

    let psi = basis.design_matrix(&stats.times, 0)?;
    let omega = basis.second_derivative_penalty();
    let obj = Objective { family, stats: &stats, psi, omega, lambda };

    // Weighted ridge fit of the link-scale initializer.
    let eta0 = initial_eta(family, &stats);
    let mut a0 = &obj.omega * (2.0 * lambda);
    let mut rhs = Array1::zeros(m);
    for i in 0..stats.times.len() {
        let w = stats.count[i] / stats.n_rows;
        let row = obj.psi.row(i);
        for a in 0..m {
            rhs[a] += w * eta0[i] * row[a];
            for b in 0..m {
                a0[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    let mut c = solve_sym(a0.view(), rhs.view()).ok_or(SmoothError::RankDeficient)?;

    let mut value = obj.value(&c);
    if !value.is_finite() {
        // A pathological initializer (possible only for extreme inputs)
        // falls back to the flat curve.
        c.fill(0.0);
        value = obj.value(&c);
    }
    let mut trace = vec![value];

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..MAX_NEWTON {
        iterations += 1;
        let (grad, hess) = obj.grad_hess(&c);
        let dir = solve_sym(hess.view(), (-&grad).view()).ok_or(SmoothError::RankDeficient)?;

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &c + &(&dir * alpha);
            let v = obj.value(&cand);
            if v <= value {
                accepted = Some((cand, v));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            None => {
                // No direction of descent at machine precision: converged.
                converged = true;
                break;
            }
            Some((cand, v)) => {
                let drop = value - v;
                c = cand;
                value = v;
                trace.push(value);
                if drop <= REL_TOL * value.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
        }
    }
    if !converged {
        return Err(SmoothError::NonConvergence(MAX_NEWTON));
    }

    let gcv_score = gcv(&obj, &c);
    Ok(SmoothFit {
        coefficients: c,
        smoothing_parameter: lambda,
        gcv_score,
        objective: value,
        trace,
        iterations,
    })
}

/// Generalized cross-validation at the converged fit, via the working
/// response: n RSS_w / (n - tr(H))^2 with H the weighted smoother matrix.
fn gcv(obj: &Objective, c: &Array1<f64>) -> f64 {
    let m = obj.psi.ncols();
    let n = obj.stats.n_rows;
    let theta = obj.theta(c);

    let mut rss = 0.0;
    let mut b_mat = Array2::zeros((m, m));
    for (i, &t) in theta.iter().enumerate() {
        let cum = obj.family.cumulant(t);
        let w = cum.b2.max(WEIGHT_FLOOR);
        // Sum over replicate rows at this time of (y - b')^2 / w.
        let sq = obj.stats.sum_sq[i] - 2.0 * cum.b1 * obj.stats.sum[i]
            + obj.stats.count[i] * cum.b1 * cum.b1;
        rss += sq / w;
        let row = obj.psi.row(i);
        let wn = obj.stats.count[i] * w / n;
        for a in 0..m {
            for b in 0..m {
                b_mat[(a, b)] += wn * row[a] * row[b];
            }
        }
    }

    let a_mat = &b_mat + &(&obj.omega * (2.0 * obj.lambda));
    let solved = match solve_sym_many(a_mat.view(), b_mat.view()) {
        Some(s) => s,
        None => return f64::INFINITY,
    };
    let tr: f64 = (0..m).map(|i| solved[(i, i)]).sum();
    let denom = n - tr;
    if denom <= 1e-8 {
        return f64::INFINITY;
    }
    n * rss / (denom * denom)
}

/// Default smoothing grid: 25 log-spaced values spanning [1e-6, 1e2].
pub fn default_grid() -> Vec<f64> {
    let (lo, hi, k) = (1e-6f64, 1e2f64, 25);
    (0..k)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

/// Fit at every grid value and keep the smallest GCV score (first on
/// ties). Grid values that fail to converge are skipped; only an empty
/// grid or a fully failed grid is an error.
pub fn select_smoothing(
    grid_times: &[f64],
    rows: &[Obs],
    family: Family,
    basis: &BSplineBasis,
    grid: &[f64],
) -> Result<SmoothFit, SmoothError> {
    if grid.is_empty() {
        return Err(SmoothError::EmptyGrid);
    }
    let mut best: Option<SmoothFit> = None;
    for &lambda in grid {
        let fit = match fit_penalized(grid_times, rows, family, basis, lambda) {
            Ok(f) => f,
            Err(SmoothError::NonConvergence(_)) | Err(SmoothError::RankDeficient) => continue,
            Err(e) => return Err(e),
        };
        let better = match &best {
            None => true,
            Some(b) => fit.gcv_score < b.gcv_score,
        };
        if better {
            best = Some(fit);
        }
    }
    best.ok_or(SmoothError::AllGridPointsFailed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn rows_from(values: &[f64]) -> Vec<Obs> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Obs { time_idx: i, replicate: 0, value: v })
            .collect()
    }

    fn test_basis(times: &[f64]) -> BSplineBasis {
        BSplineBasis::with_quantile_knots(3, 6, times, (0.0, 1.0)).unwrap()
    }

    fn curve(basis: &BSplineBasis, c: &Array1<f64>, t: f64) -> f64 {
        let mut buf = vec![0.0; basis.len()];
        basis.eval_into(t, &mut buf).unwrap();
        buf.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn constant_data_fits_a_constant() {
        let times = grid(20);
        let rows = rows_from(&vec![5.0; 20]);
        let basis = test_basis(&times);
        // Tolerance is set by penalty-matrix assembly precision: the
        // computed Omega annihilates constants only to ~1e-12, which a
        // smoothing parameter of 1e4 amplifies into the coefficients.
        for lambda in [1e-4, 1.0, 1e4] {
            let fit = fit_penalized(&times, &rows, Family::Gaussian, &basis, lambda).unwrap();
            for i in 0..=50 {
                let t = i as f64 / 50.0;
                assert_relative_eq!(curve(&basis, &fit.coefficients, t), 5.0, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn huge_penalty_gives_the_least_squares_line() {
        let times = grid(25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f64> = times
            .iter()
            .map(|&t| 2.0 * t - 0.7 + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let fit = fit_penalized(&times, &rows, Family::Gaussian, &basis, 1e6).unwrap();

        // Straight-line oracle computed directly from the data.
        let n = times.len() as f64;
        let (tb, yb) = (times.iter().sum::<f64>() / n, values.iter().sum::<f64>() / n);
        let sxx: f64 = times.iter().map(|t| (t - tb) * (t - tb)).sum();
        let sxy: f64 = times.iter().zip(&values).map(|(t, y)| (t - tb) * (y - yb)).sum();
        let slope = sxy / sxx;
        for (&t, _) in times.iter().zip(&values) {
            let line = yb + slope * (t - tb);
            assert!((curve(&basis, &fit.coefficients, t) - line).abs() < 1e-3);
        }
    }

    #[test]
    fn gaussian_fit_matches_dense_normal_equations() {
        let times = grid(30);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> =
            times.iter().map(|&t| (3.0 * t).sin() + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let lambda = 0.01;
        let fit = fit_penalized(&times, &rows, Family::Gaussian, &basis, lambda).unwrap();

        // Oracle: assemble (Psi'Psi/n + 2 lambda Omega) c = Psi'y/n by hand.
        let m = basis.len();
        let psi = basis.design_matrix(&times, 0).unwrap();
        let omega = basis.second_derivative_penalty();
        let n = times.len() as f64;
        let mut a = Array2::<f64>::zeros((m, m));
        let mut rhs = Array1::<f64>::zeros(m);
        for i in 0..times.len() {
            for p in 0..m {
                rhs[p] += psi[(i, p)] * values[i] / n;
                for q in 0..m {
                    a[(p, q)] += psi[(i, p)] * psi[(i, q)] / n;
                }
            }
        }
        a += &(&omega * (2.0 * lambda));
        let oracle = solve_sym(a.view(), rhs.view()).unwrap();
        for p in 0..m {
            assert_relative_eq!(fit.coefficients[p], oracle[p], max_relative = 1e-8, epsilon = 1e-12);
        }
        // Gaussian is solved exactly by the initializer plus one check step.
        assert!(fit.iterations <= 2, "took {} iterations", fit.iterations);
    }

    #[test]
    fn count_fits_sit_at_a_minimum() {
        let times = grid(30);
        let basis = test_basis(&times);
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        for family in [Family::Poisson, Family::Binomial { trials: 40 }] {
            let latent = |t: f64| match family {
                Family::Poisson => 2.0 + (4.0 * t).sin(),
                _ => 1.5 * (3.0 * t).cos(),
            };
            let values: Vec<f64> =
                times.iter().map(|&t| family.sample(latent(t), &mut rng)).collect();
            let rows = rows_from(&values);
            let fit = fit_penalized(&times, &rows, family, &basis, 1e-3).unwrap();

            let stats = collapse(&times, &rows).unwrap();
            let obj = Objective {
                family,
                stats: &stats,
                psi: basis.design_matrix(&stats.times, 0).unwrap(),
                omega: basis.second_derivative_penalty(),
                lambda: 1e-3,
            };
            let at_min = obj.value(&fit.coefficients);
            for _ in 0..5 {
                let dir: Array1<f64> = (0..basis.len())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect();
                let norm = dir.dot(&dir).sqrt();
                let dir = &dir * (1e-4 / norm);
                assert!(obj.value(&(&fit.coefficients + &dir)) >= at_min - 1e-10 * at_min.abs());
                assert!(obj.value(&(&fit.coefficients - &dir)) >= at_min - 1e-10 * at_min.abs());
            }
        }
    }

    #[test]
    fn objective_trace_is_nonincreasing() {
        let times = grid(40);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> =
            times.iter().map(|&t| Family::Poisson.sample(1.0 + 2.0 * t, &mut rng)).collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let fit = fit_penalized(&times, &rows, Family::Poisson, &basis, 1e-2).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn fit_is_invariant_to_row_order() {
        let times = grid(15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for i in 0..15 {
            for r in 0..3 {
                rows.push(Obs {
                    time_idx: i,
                    replicate: r,
                    value: Family::Poisson.sample(1.0, &mut rng),
                });
            }
        }
        let basis = test_basis(&times);
        let a = fit_penalized(&times, &rows, Family::Poisson, &basis, 0.1).unwrap();
        rows.reverse();
        rows.swap(0, 17);
        let b = fit_penalized(&times, &rows, Family::Poisson, &basis, 0.1).unwrap();
        assert_eq!(a.coefficients.to_vec(), b.coefficients.to_vec());
    }

    // Count magnitudes like the ones the Poisson preset produces on its
    // drift processes: intensities up to e^20.
    #[test]
    fn poisson_converges_at_extreme_intensities() {
        let times = grid(60);
        let truth: Vec<f64> = times.iter().map(|&t| 0.5 + 19.5 * t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        for (i, &th) in truth.iter().enumerate() {
            for r in 0..10 {
                rows.push(Obs {
                    time_idx: i,
                    replicate: r,
                    value: Family::Poisson.sample(th, &mut rng),
                });
            }
        }
        let basis = test_basis(&times);
        let fit = select_smoothing(&times, &rows, Family::Poisson, &basis, &default_grid()).unwrap();
        assert!(fit.iterations < MAX_NEWTON);
        for (i, &t) in times.iter().enumerate() {
            assert!(
                (curve(&basis, &fit.coefficients, t) - truth[i]).abs() < 0.5,
                "poor recovery at t = {t}"
            );
        }
    }

    #[test]
    fn binomial_replicates_recover_the_logit_curve() {
        let times = grid(25);
        let truth: Vec<f64> = times.iter().map(|&t| 2.5 * (2.0 * t - 1.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fam = Family::Binomial { trials: 1 };
        let mut rows = Vec::new();
        for (i, &th) in truth.iter().enumerate() {
            for r in 0..40 {
                rows.push(Obs { time_idx: i, replicate: r, value: fam.sample(th, &mut rng) });
            }
        }
        let basis = test_basis(&times);
        let fit = select_smoothing(&times, &rows, fam, &basis, &default_grid()).unwrap();
        for (i, &t) in times.iter().enumerate() {
            assert!((curve(&basis, &fit.coefficients, t) - truth[i]).abs() < 0.8);
        }
    }

    // Statistical tendency, not a certainty: GCV occasionally undersmooths
    // pure noise (a draw can contain a pattern that beats the straight
    // line by a few percent). Sweeping n in 30..100, basis sizes 6..14,
    // spans, and grid coarseness, the hit rate tops out at 16/20 seeds;
    // the threshold asserts a solid majority without pretending GCV never
    // slips.
    #[test]
    fn pure_noise_usually_selects_the_heaviest_smoothing() {
        let times = grid(40);
        let basis = test_basis(&times);
        let g = default_grid();
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..40)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            let rows = rows_from(&values);
            let fit = select_smoothing(&times, &rows, Family::Gaussian, &basis, &g).unwrap();
            if fit.smoothing_parameter == *g.last().unwrap() {
                hits += 1;
            }
        }
        assert!(hits >= 15, "heaviest smoothing chosen in only {hits}/20 runs");
    }

    #[test]
    fn smooth_data_beats_the_heaviest_smoothing() {
        let times = grid(40);
        let values: Vec<f64> = times.iter().map(|&t| (4.0 * t).sin()).collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let g = default_grid();
        let picked = select_smoothing(&times, &rows, Family::Gaussian, &basis, &g).unwrap();
        let heaviest =
            fit_penalized(&times, &rows, Family::Gaussian, &basis, *g.last().unwrap()).unwrap();
        let mse = |fit: &SmoothFit| -> f64 {
            times
                .iter()
                .zip(&values)
                .map(|(&t, &y)| (curve(&basis, &fit.coefficients, t) - y).powi(2))
                .sum::<f64>()
        };
        assert!(mse(&picked) <= mse(&heaviest));
    }

    #[test]
    fn singleton_grid_returns_that_fit() {
        let times = grid(20);
        let values: Vec<f64> = times.iter().map(|&t| t * t).collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let picked = select_smoothing(&times, &rows, Family::Gaussian, &basis, &[0.37]).unwrap();
        assert_eq!(picked.smoothing_parameter, 0.37);
        let direct = fit_penalized(&times, &rows, Family::Gaussian, &basis, 0.37).unwrap();
        assert_eq!(picked.coefficients.to_vec(), direct.coefficients.to_vec());
    }

    #[test]
    fn input_validation() {
        let times = grid(20);
        let values = vec![0.0; 20];
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        assert!(matches!(
            fit_penalized(&times, &rows, Family::Gaussian, &basis, 0.0),
            Err(SmoothError::BadLambda)
        ));
        assert!(matches!(
            fit_penalized(&times, &[], Family::Gaussian, &basis, 1.0),
            Err(SmoothError::Empty)
        ));
        assert!(matches!(
            select_smoothing(&times, &rows, Family::Gaussian, &basis, &[]),
            Err(SmoothError::EmptyGrid)
        ));
        // 4 distinct times cannot support a 10-function basis.
        let few: Vec<Obs> = rows[..4].to_vec();
        assert!(matches!(
            fit_penalized(&times, &few, Family::Gaussian, &basis, 1.0),
            Err(SmoothError::TooFewDistinctTimes { .. })
        ));
        let mut bad = rows.clone();
        bad[3].value = f64::NAN;
        assert!(matches!(
            fit_penalized(&times, &bad, Family::Gaussian, &basis, 1.0),
            Err(SmoothError::NonFiniteValue)
        ));
    }

    #[test]
    fn gcv_is_finite_and_positive_on_noisy_data() {
        let times = grid(30);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (3.0 * t).sin() + 0.2 * z
            })
            .collect();
        let rows = rows_from(&values);
        let basis = test_basis(&times);
        let fit = fit_penalized(&times, &rows, Family::Gaussian, &basis, 0.01).unwrap();
        assert!(fit.gcv_score.is_finite() && fit.gcv_score > 0.0);
    }
}
