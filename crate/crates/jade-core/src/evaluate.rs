//! Error metrics of a fitted model against a simulated truth: latent
//! curve and derivative error, componentwise error of the additive
//! model over the range the truth actually visits, and edge recovery
//! rates of the estimated network.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, FitResult, JadeState};
use crate::linalg::trapezoid_rule;
use crate::simulate::{SimulateError, Trajectory, TruthSpec, DEFAULT_STEP};

/// Node count of the evaluation quadratures.
pub const EVAL_NODES: usize = 401;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation span ({got:?}) does not match the fitted span ({expected:?})")]
    SpanMismatch { expected: (f64, f64), got: (f64, f64) },
    #[error("truth has {truth} processes but the fit has {fit}")]
    ProcessMismatch { truth: usize, fit: usize },
    #[error("curve order must be 0 (values) or 1 (time derivatives), got {0}")]
    BadOrder(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

/// Summary of one fit against one truth. Rates are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_latent: f64,
    pub mse_deriv: f64,
    pub mse_active: f64,
    pub mse_inactive: f64,
    pub tp_rate: f64,
    pub fp_rate: f64,
}

/// Componentwise squared-error integrals: `per[(j, k)]` is the error of
/// the fitted component (j, k) over the range truth process k visits,
/// with the true component mean-centered there. `active` and `inactive`
/// average the entries over true edges and non-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentErrors {
    pub per: Array2<f64>,
    pub active: f64,
    pub inactive: f64,
}

fn check_span(engine: &Engine, traj: &Trajectory) -> Result<(), EvalError> {
    let expected = engine.dataset().t_span;
    let got = (traj.t[0], *traj.t.last().expect("trajectory grid nonempty"));
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
    if close(expected.0, got.0) && close(expected.1, got.1) {
        Ok(())
    } else {
        Err(EvalError::SpanMismatch { expected, got })
    }
}

/// Mean over processes of the integrated squared error between fitted
/// and true latent curves (`order` 0) or their time derivatives
/// (`order` 1), on `nodes` trapezoid points spanning the fitted
/// interval. The
/// integral is not divided by the span length: a constant offset delta
/// on every curve scores delta^2 times the span.
pub fn mse_latent_on(
    engine: &Engine,
    state: &JadeState,
    traj: &Trajectory,
    order: usize,
    nodes: usize,
) -> Result<f64, EvalError> {
    if order > 1 {
        return Err(EvalError::BadOrder(order));
    }
    check_span(engine, traj)?;
    let p = traj.p();
    if p != engine.dataset().p() {
        return Err(EvalError::ProcessMismatch { truth: p, fit: engine.dataset().p() });
    }
    let span = engine.dataset().t_span;
    let (ts, ws) = trapezoid_rule(span.0, span.1, nodes);
    let mut total = 0.0;
    for j in 0..p {
        let fitted = if order == 0 {
            engine.latent_curve(state, j, &ts)?
        } else {
            engine.latent_deriv_curve(state, j, &ts)?
        };
        let mut acc = 0.0;
        for ((&t, &w), f) in ts.iter().zip(&ws).zip(&fitted) {
            let truth = if order == 0 { traj.value_at(j, t) } else { traj.deriv_at(j, t) };
            let d = f - truth;
            acc += w * d * d;
        }
        total += acc;
    }
    Ok(total / p as f64)
}

/// `mse_latent_on` at the standard node count.
pub fn mse_latent(
    engine: &Engine,
    state: &JadeState,
    traj: &Trajectory,
    order: usize,
) -> Result<f64, EvalError> {
    mse_latent_on(engine, state, traj, order, EVAL_NODES)
}

/// Componentwise error integrals; see [`ComponentErrors`]. Each
/// component is compared on `nodes` trapezoid points over the empirical
/// range of the corresponding truth process, the only region where the
/// truth constrains it.
pub fn mse_components_on(
    engine: &Engine,
    state: &JadeState,
    truth: &TruthSpec,
    traj: &Trajectory,
    nodes: usize,
) -> Result<ComponentErrors, EvalError> {
    let p = truth.p;
    if p != engine.dataset().p() {
        return Err(EvalError::ProcessMismatch { truth: p, fit: engine.dataset().p() });
    }
    let adjacency = truth.adjacency();
    let mut per = Array2::zeros((p, p));
    let mut active = (0.0, 0usize);
    let mut inactive = (0.0, 0usize);
    for k in 0..p {
        let row = traj.values.row(k);
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            // Degenerate range: the truth never moves, so no component
            // of this process is identified; score zero.
            for j in 0..p {
                let slot = if adjacency[j][k] { &mut active } else { &mut inactive };
                slot.1 += 1;
            }
            continue;
        }
        let (us, ws) = trapezoid_rule(lo, hi, nodes);
        let width = hi - lo;
        for j in 0..p {
            let fitted = engine.component_curve(state, j, k, &us)?;
            let [c0, c1, c2, c3] = truth.component_poly(j, k);
            let poly: Vec<f64> =
                us.iter().map(|&u| c0 + u * (c1 + u * (c2 + u * c3))).collect();
            let mean = poly.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>() / width;
            let err: f64 = fitted
                .iter()
                .zip(&poly)
                .zip(&ws)
                .map(|((f, v), w)| {
                    let d = f - (v - mean);
                    w * d * d
                })
                .sum();
            per[(j, k)] = err;
            let slot = if adjacency[j][k] { &mut active } else { &mut inactive };
            slot.0 += err;
            slot.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { 0.0 } else { s / c as f64 };
    Ok(ComponentErrors { per, active: mean(active), inactive: mean(inactive) })
}

/// `mse_components_on` at the standard node count.
pub fn mse_components(
    engine: &Engine,
    state: &JadeState,
    truth: &TruthSpec,
    traj: &Trajectory,
) -> Result<ComponentErrors, EvalError> {
    mse_components_on(engine, state, truth, traj, EVAL_NODES)
}

/// Percentage of true edges recovered and of non-edges falsely
/// reported. An empty edge set counts as fully recovered; an empty
/// non-edge set as never violated.
pub fn network_rates(estimated: &[Vec<bool>], truth: &[Vec<bool>]) -> (f64, f64) {
    let mut edges = 0usize;
    let mut non_edges = 0usize;
    let mut hits = 0usize;
    let mut false_hits = 0usize;
    for (er, tr) in estimated.iter().zip(truth) {
        for (&e, &t) in er.iter().zip(tr) {
            if t {
                edges += 1;
                if e {
                    hits += 1;
                }
            } else {
                non_edges += 1;
                if e {
                    false_hits += 1;
                }
            }
        }
    }
    let tp = if edges == 0 { 100.0 } else { 100.0 * hits as f64 / edges as f64 };
    let fp = if non_edges == 0 { 0.0 } else { 100.0 * false_hits as f64 / non_edges as f64 };
    (tp, fp)
}

/// Full report of a fit against the truth that generated its data. The
/// truth is integrated at the simulation step and rescaled exactly as
/// the observations were.
pub fn evaluate(engine: &Engine, fit: &FitResult, truth: &TruthSpec) -> Result<EvalReport, EvalError> {
    let traj = truth.solve(DEFAULT_STEP)?;
    let mse_latent = mse_latent_on(engine, &fit.state, &traj, 0, EVAL_NODES)?;
    let mse_deriv = mse_latent_on(engine, &fit.state, &traj, 1, EVAL_NODES)?;
    let comp = mse_components_on(engine, &fit.state, truth, &traj, EVAL_NODES)?;
    let (tp_rate, fp_rate) = network_rates(&fit.adjacency, &truth.adjacency());
    Ok(EvalReport {
        mse_latent,
        mse_deriv,
        mse_active: comp.active,
        mse_inactive: comp.inactive,
        tp_rate,
        fp_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Obs};
    use crate::engine::{Diagnostics, JadeConfig, LambdaGamma, Method};
    use crate::expfam::Family;
    use crate::simulate::{build_truth, sample_dataset, Preset};
    use approx::assert_relative_eq;
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(seed: u64, p: usize, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_span = (0.0, 10.0);
        let times: Vec<f64> =
            (0..n).map(|i| t_span.0 + (t_span.1 - t_span.0) * i as f64 / (n - 1) as f64).collect();
        let family = Family::Gaussian;
        let mut processes = Vec::with_capacity(p);
        for _ in 0..p {
            let a = rng.random_range(-0.5..0.5);
            let b = rng.random_range(0.4..1.2);
            let w = rng.random_range(0.3..0.8);
            let ph = rng.random_range(0.0..std::f64::consts::TAU);
            let rows = times
                .iter()
                .enumerate()
                .map(|(i, &t)| Obs {
                    time_idx: i,
                    replicate: 0,
                    value: a + b * (w * t + ph).sin() + 0.1 * rng.random_range(-1.0..1.0),
                })
                .collect();
            processes.push(rows);
        }
        Dataset { times, t_span, family, processes }
    }

    fn quick_engine(seed: u64, p: usize, n: usize) -> Engine {
        let mut config = JadeConfig::default();
        config.quad_nodes = 101;
        config.lambda_gamma = LambdaGamma::Value(0.05);
        Engine::new(toy_dataset(seed, p, n), config).unwrap()
    }

    /// Trajectory whose grid is exactly the evaluation grid and whose
    /// rows are the fitted curves of `state`.
    fn trajectory_of_state(engine: &Engine, state: &JadeState, nodes: usize) -> Trajectory {
        let span = engine.dataset().t_span;
        let (ts, _) = trapezoid_rule(span.0, span.1, nodes);
        let p = engine.dataset().p();
        let mut values = Array2::zeros((p, nodes));
        let mut derivs = Array2::zeros((p, nodes));
        for j in 0..p {
            let v = engine.latent_curve(state, j, &ts).unwrap();
            let d = engine.latent_deriv_curve(state, j, &ts).unwrap();
            values.row_mut(j).assign(&Array1::from_vec(v));
            derivs.row_mut(j).assign(&Array1::from_vec(d));
        }
        Trajectory { t: ts, values, derivs }
    }

    #[test]
    fn a_fit_compared_to_itself_scores_exactly_zero() {
        let engine = quick_engine(1, 2, 30);
        let state = engine.initial_state();
        let traj = trajectory_of_state(&engine, &state, EVAL_NODES);
        assert_eq!(mse_latent(&engine, &state, &traj, 0).unwrap(), 0.0);
        assert_eq!(mse_latent(&engine, &state, &traj, 1).unwrap(), 0.0);
    }

    #[test]
    fn constant_offsets_integrate_to_the_span_length() {
        let engine = quick_engine(2, 2, 30);
        let state = engine.initial_state();
        let mut traj = trajectory_of_state(&engine, &state, EVAL_NODES);
        let delta = 0.37;
        traj.values.mapv_inplace(|v| v + delta);
        let got = mse_latent(&engine, &state, &traj, 0).unwrap();
        let span = engine.dataset().t_span;
        assert_relative_eq!(got, delta * delta * (span.1 - span.0), max_relative = 1e-12);
        // Derivatives are untouched by the offset.
        assert_eq!(mse_latent(&engine, &state, &traj, 1).unwrap(), 0.0);
    }

    #[test]
    fn standard_grid_agrees_with_a_fine_grid_oracle() {
        let engine = quick_engine(3, 2, 30);
        let state = engine.initial_state();
        // An independent smooth truth, tabulated densely on its own grid.
        let span = engine.dataset().t_span;
        let m = 4001;
        let ts: Vec<f64> =
            (0..m).map(|i| span.0 + (span.1 - span.0) * i as f64 / (m - 1) as f64).collect();
        let mut values = Array2::zeros((2, m));
        let mut derivs = Array2::zeros((2, m));
        for (i, &t) in ts.iter().enumerate() {
            values[(0, i)] = 0.3 * (0.5 * t).sin();
            derivs[(0, i)] = 0.15 * (0.5 * t).cos();
            values[(1, i)] = 0.1 * t - 0.4;
            derivs[(1, i)] = 0.1;
        }
        let traj = Trajectory { t: ts, values, derivs };
        for order in [0, 1] {
            let standard = mse_latent(&engine, &state, &traj, order).unwrap();
            let fine = mse_latent_on(&engine, &state, &traj, order, 100_001).unwrap();
            assert_relative_eq!(standard, fine, max_relative = 1e-4);
        }
    }

    #[test]
    fn mismatched_spans_and_orders_are_rejected() {
        let engine = quick_engine(4, 2, 30);
        let state = engine.initial_state();
        let traj = trajectory_of_state(&engine, &state, EVAL_NODES);
        assert!(matches!(
            mse_latent(&engine, &state, &traj, 2),
            Err(EvalError::BadOrder(2))
        ));
        let mut short = traj.clone();
        short.t.iter_mut().for_each(|t| *t *= 0.5);
        assert!(matches!(
            mse_latent(&engine, &state, &short, 0),
            Err(EvalError::SpanMismatch { .. })
        ));
    }

    #[test]
    fn zero_model_component_errors_match_an_analytic_oracle() {
        // With an all-zero model the active error is the mean integral
        // of the centered true components, and the inactive error is
        // exactly zero. The oracle integrates the polynomials in closed
        // form via antiderivatives.
        let truth = build_truth(Preset::Gaussian, 7).unwrap();
        let traj = truth.solve(DEFAULT_STEP).unwrap();
        let (data, _) = sample_dataset(&traj, truth.family, 40, 1, Some(25.0), 7).unwrap();
        let mut config = JadeConfig::default();
        config.quad_nodes = 101;
        config.lambda_gamma = LambdaGamma::Value(1.0);
        let engine = Engine::new(data, config).unwrap();
        let state = engine.initial_state();

        let comp = mse_components(&engine, &state, &truth, &traj).unwrap();
        assert_eq!(comp.inactive, 0.0);

        // Closed-form integral of the centered cubic over [lo, hi].
        let adjacency = truth.adjacency();
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in 0..truth.p {
            let row = traj.values.row(k);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = hi - lo;
            // Moment integrals of u^0..u^6 over [lo, hi].
            let moment =
                |d: u32| (hi.powi(d as i32 + 1) - lo.powi(d as i32 + 1)) / (d as f64 + 1.0);
            for j in 0..truth.p {
                if !adjacency[j][k] {
                    continue;
                }
                let c = truth.component_poly(j, k);
                let int_f: f64 = (0..4).map(|d| c[d] * moment(d as u32)).sum();
                let mean = int_f / width;
                let mut int_f2 = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        int_f2 += c[a] * c[b] * moment((a + b) as u32);
                    }
                }
                acc += int_f2 - width * mean * mean;
                count += 1;
            }
        }
        let oracle = acc / count as f64;
        assert_relative_eq!(comp.active, oracle, max_relative = 1e-4);
        assert_eq!(count, truth.edge_count());
        assert_eq!(count, 8);
    }

    #[test]
    fn network_rates_frozen_example() {
        // 10 processes, 8 true edges; an estimate holding all 8 plus 9
        // extras scores (100, 900/92).
        let truth = build_truth(Preset::Gaussian, 11).unwrap();
        let true_adj = truth.adjacency();
        let mut est = true_adj.clone();
        let mut added = 0;
        'outer: for j in 0..10 {
            for k in 0..10 {
                if !est[j][k] {
                    est[j][k] = true;
                    added += 1;
                    if added == 9 {
                        break 'outer;
                    }
                }
            }
        }
        let (tp, fp) = network_rates(&est, &true_adj);
        assert_relative_eq!(tp, 100.0, max_relative = 1e-15);
        assert_relative_eq!(fp, 900.0 / 92.0, max_relative = 1e-15);

        let none = vec![vec![false; 10]; 10];
        assert_eq!(network_rates(&none, &true_adj), (0.0, 0.0));
        assert_eq!(network_rates(&true_adj, &none), (100.0, 8.0));
    }

    #[test]
    fn truth_derivatives_come_from_the_stored_field() {
        // A trajectory whose stored derivatives contradict the finite
        // differences of its values: constant values, unit derivatives.
        // The derivative error must follow the stored field.
        let engine = quick_engine(5, 2, 30);
        let m = engine.latent_basis().len();
        let state = JadeState::zero_model(Array2::zeros((2, m)), engine.block_len());
        let span = engine.dataset().t_span;
        let nodes = 1001;
        let ts: Vec<f64> =
            (0..nodes).map(|i| span.0 + (span.1 - span.0) * i as f64 / (nodes - 1) as f64).collect();
        let traj = Trajectory {
            t: ts,
            values: Array2::zeros((2, nodes)),
            derivs: Array2::ones((2, nodes)),
        };
        // Zero state: fitted values and derivatives are identically zero.
        assert_relative_eq!(
            mse_latent(&engine, &state, &traj, 0).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            mse_latent(&engine, &state, &traj, 1).unwrap(),
            span.1 - span.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn reports_are_invariant_under_process_relabeling() {
        let truth = build_truth(Preset::Gaussian, 13).unwrap();
        let traj = truth.solve(DEFAULT_STEP).unwrap();
        let (data, _) = sample_dataset(&traj, truth.family, 30, 1, Some(25.0), 5).unwrap();
        let mut config = JadeConfig::default();
        config.quad_nodes = 101;
        config.lambda_gamma = LambdaGamma::Value(0.5);
        let engine = Engine::new(data.clone(), config).unwrap();

        // A handmade fit with nontrivial blocks so every metric is
        // exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = truth.p;
        let m = engine.latent_basis().len();
        let l = engine.block_len();
        let mut state = JadeState::zero_model(
            Array2::from_shape_fn((p, m), |_| rng.random_range(-0.5..0.5)),
            l,
        );
        for j in 0..p {
            state.intercepts[j] = rng.random_range(-0.3..0.3);
            for k in 0..p {
                if rng.random_range(0.0..1.0) < 0.3 {
                    state.gamma[j][k] =
                        Array1::from_shape_fn(l, |_| rng.random_range(-0.4..0.4));
                }
            }
        }
        let fit = FitResult {
            adjacency: state.adjacency(),
            state: state.clone(),
            objective_trace: vec![],
            selected_lambda_gamma: 0.5,
            method: Method::Jade,
            diagnostics: Diagnostics::default(),
        };
        let base = evaluate(&engine, &fit, &truth).unwrap();

        // Rotate the process labels by one.
        let perm: Vec<usize> = (0..p).map(|j| (j + 1) % p).collect();
        let mut data2 = data.clone();
        let mut truth2 = truth.clone();
        let mut state2 = state.clone();
        for (new, &old) in perm.iter().enumerate() {
            data2.processes[new] = data.processes[old].clone();
            truth2.intercepts[new] = truth.intercepts[old];
            truth2.rescale[new] = truth.rescale[old];
            truth2.init[new] = truth.init[old];
            state2.intercepts[new] = state.intercepts[old];
            state2.latent.row_mut(new).assign(&state.latent.row(old));
            for (new_k, &old_k) in perm.iter().enumerate() {
                truth2.triples[new][new_k] = truth.triples[old][old_k];
                state2.gamma[new][new_k] = state.gamma[old][old_k].clone();
            }
        }
        let engine2 = Engine::new(data2, *engine.config()).unwrap();
        let fit2 = FitResult {
            adjacency: state2.adjacency(),
            state: state2,
            objective_trace: vec![],
            selected_lambda_gamma: 0.5,
            method: Method::Jade,
            diagnostics: Diagnostics::default(),
        };
        let permuted = evaluate(&engine2, &fit2, &truth2).unwrap();

        assert_relative_eq!(base.mse_latent, permuted.mse_latent, max_relative = 1e-12);
        assert_relative_eq!(base.mse_deriv, permuted.mse_deriv, max_relative = 1e-12);
        assert_relative_eq!(base.mse_active, permuted.mse_active, max_relative = 1e-12);
        assert_relative_eq!(base.mse_inactive, permuted.mse_inactive, max_relative = 1e-12);
        assert_eq!(base.tp_rate, permuted.tp_rate);
        assert_eq!(base.fp_rate, permuted.fp_rate);
    }

    #[test]
    fn process_count_mismatches_are_rejected() {
        let truth = build_truth(Preset::Gaussian, 17).unwrap();
        let engine = quick_engine(6, 2, 30);
        let state = engine.initial_state();
        let traj = truth.solve(0.01).unwrap();
        assert!(matches!(
            mse_components(&engine, &state, &truth, &traj),
            Err(EvalError::ProcessMismatch { .. })
        ));
    }
}
