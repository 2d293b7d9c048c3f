// Scratch diagnostic: walk the tuning path on one dataset and print, per
// lambda, the score under several residual frames next to the oracle
// metrics. Not part of the shipped tool.

use jade_cli::io;
use jade_core::engine::{Engine, JadeConfig, Method};
use jade_core::evaluate;
use std::path::Path;

fn score_from(resid: &[f64], nz: usize, n: f64) -> (f64, f64) {
    let slog: f64 = resid.iter().map(|r| r.max(1e-300).ln()).sum();
    (slog, slog + nz as f64 * n.ln() / n)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = args
        .get(1)
        .cloned()
        .unwrap_or_else(|| "/tmp/bench1/data/dataset.csv".into());
    let truth_path = args
        .get(2)
        .cloned()
        .unwrap_or_else(|| "/tmp/bench1/data/truth.json".into());
    let (dataset, _meta) = io::read_dataset(Path::new(&data)).expect("dataset");
    let truth = io::read_truth(Path::new(&truth_path)).expect("truth");
    let engine = Engine::new(dataset, JadeConfig::default()).expect("engine");
    let n = engine.dataset().n_times() as f64;
    let p = engine.dataset().p();
    let grid = engine.default_tune_grid().expect("grid");
    let fits = engine.fits_over(&grid, Method::Jade).expect("fits");
    println!(
        "{:>9} {:>4} {:>9} {:>9} {:>9} {:>9} {:>6} {:>6} {:>8} {:>8}",
        "lambda", "nz", "own_slog", "own_sc", "init_slog", "init_sc", "tp", "fp", "mse_th", "mse_dth"
    );
    for (lam, fit) in grid.iter().zip(&fits) {
        let nz: usize = (0..p).map(|j| fit.state.nonzero_count(j)).sum();
        let own = engine.residual_integrals(&fit.state).expect("own resid");
        let mut frame = engine.initial_state();
        frame.intercepts = fit.state.intercepts.clone();
        frame.gamma = fit.state.gamma.clone();
        let init = engine.residual_integrals(&frame).expect("init resid");
        let (own_slog, own_sc) = score_from(&own, nz, n);
        let (init_slog, init_sc) = score_from(&init, nz, n);
        let report = evaluate::evaluate(&engine, fit, &truth).expect("eval");
        println!(
            "{:>9.4} {:>4} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>6.1} {:>6.1} {:>8.4} {:>8.4}",
            lam,
            nz,
            own_slog,
            own_sc,
            init_slog,
            init_sc,
            report.tp_rate,
            report.fp_rate,
            report.mse_latent,
            report.mse_deriv
        );
    }
}
