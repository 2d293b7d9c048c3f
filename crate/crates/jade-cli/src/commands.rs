//! The five subcommands as library functions: each returns the paths it
//! wrote plus a one-line summary for the terminal.

use std::path::{Path, PathBuf};

use jade_core::data::DatasetMeta;
use jade_core::engine::{Engine, FitResult, LambdaGamma, Method};
use jade_core::evaluate::{evaluate, EvalReport};
use jade_core::simulate::{build_truth, sample_dataset, DEFAULT_STEP};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::io::{self, FitDocument, ResultRow, TuneRow};

#[derive(Debug)]
pub struct SimulateArtifacts {
    pub dataset: PathBuf,
    pub meta: PathBuf,
    pub truth: PathBuf,
    pub summary: String,
}

/// Draw a truth, integrate it, sample observations, and write all three
/// dataset artifacts.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateArtifacts, CliError> {
    cfg.validate()?;
    let truth = build_truth(cfg.preset, cfg.seed)?;
    let traj = truth.solve(DEFAULT_STEP)?;
    let replicates = cfg.resolved_replicates();
    let snr = cfg.resolved_snr();
    let (dataset, noise_sd) =
        sample_dataset(&traj, truth.family, cfg.n, replicates, snr, cfg.seed)?;
    let meta = DatasetMeta {
        family: dataset.family,
        t_span: dataset.t_span,
        n: cfg.n,
        replicates,
        snr,
        noise_sd,
        seed: Some(cfg.seed),
        preset: Some(cfg.preset.name().to_string()),
    };
    io::ensure_dir(&cfg.out)?;
    let (dataset_path, meta_path) = io::write_dataset(&cfg.out, &dataset, &meta)?;
    let truth_path = io::write_truth(&cfg.out, &truth)?;
    let summary = format!(
        "simulated p={} n={} family={} replicates={} seed={} -> {}",
        truth.p,
        cfg.n,
        cfg.preset.name(),
        replicates,
        cfg.seed,
        dataset_path.display()
    );
    Ok(SimulateArtifacts { dataset: dataset_path, meta: meta_path, truth: truth_path, summary })
}

#[derive(Debug)]
pub struct FitArtifacts {
    pub fit: PathBuf,
    pub curves: PathBuf,
    pub components: PathBuf,
    pub document: FitDocument,
    pub summary: String,
}

fn fit_with(engine: &Engine, cfg: &ExperimentConfig, method: Method) -> Result<FitResult, CliError> {
    match engine.config().lambda_gamma {
        LambdaGamma::Value(_) => Ok(match method {
            Method::Jade => engine.fit()?,
            Method::TwoStage => engine.fit_two_stage()?,
        }),
        LambdaGamma::Auto => {
            let grid = cfg.lambda_grid.build(engine)?;
            Ok(engine.tune(&grid, method)?.1)
        }
    }
}

fn write_fit_artifacts(
    engine: &Engine,
    fit: &FitResult,
    seed: Option<u64>,
    out: &Path,
) -> Result<(PathBuf, PathBuf, PathBuf, FitDocument), CliError> {
    io::ensure_dir(out)?;
    let document = io::fit_document(engine, fit, seed);
    let fit_path = io::write_fit(out, &document)?;
    let curves = io::write_curves(out, engine, &fit.state)?;
    let components = io::write_components(out, engine, &fit.state)?;
    Ok((fit_path, curves, components, document))
}

/// Fit one dataset with the requested method and write the fit document
/// plus the plot-ready curve and component tables.
pub fn cmd_fit(
    data: &Path,
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<FitArtifacts, CliError> {
    cfg.validate()?;
    let (dataset, meta) = io::read_dataset(data)?;
    let engine = Engine::new(dataset, cfg.jade)?;
    let fit = fit_with(&engine, cfg, method)?;
    let (fit_path, curves, components, document) =
        write_fit_artifacts(&engine, &fit, meta.seed, &cfg.out)?;
    let edges: usize =
        fit.adjacency.iter().map(|row| row.iter().filter(|&&a| a).count()).sum();
    let total = fit.objective_trace.last().map_or(f64::NAN, |b| b.total);
    let summary = format!(
        "fitted method={} lambda_gamma={} edges={} objective={:.6} -> {}",
        match method {
            Method::Jade => "jade",
            Method::TwoStage => "twostage",
        },
        fit.selected_lambda_gamma,
        edges,
        total,
        fit_path.display()
    );
    Ok(FitArtifacts { fit: fit_path, curves, components, document, summary })
}

#[derive(Debug)]
pub struct TuneArtifacts {
    pub tuning: PathBuf,
    pub fit: PathBuf,
    pub curves: PathBuf,
    pub components: PathBuf,
    pub rows: Vec<TuneRow>,
    pub best_lambda: f64,
    pub summary: String,
}

/// Fit the whole penalty grid, write the score table, and keep the best
/// fit's artifacts.
pub fn cmd_tune(
    data: &Path,
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<TuneArtifacts, CliError> {
    cfg.validate()?;
    let (dataset, meta) = io::read_dataset(data)?;
    let engine = Engine::new(dataset, cfg.jade)?;
    let grid = cfg.lambda_grid.build(&engine)?;
    let fits = engine.fits_over(&grid, method)?;
    let scores = fits
        .iter()
        .map(|f| engine.model_score(f))
        .collect::<Result<Vec<f64>, _>>()?;
    let rows: Vec<TuneRow> = grid
        .iter()
        .zip(&fits)
        .zip(&scores)
        .map(|((&lambda_gamma, fit), &score)| TuneRow {
            lambda_gamma,
            score,
            nnz: (0..engine.dataset().p()).map(|j| fit.state.nonzero_count(j)).sum(),
            fidelity: fit.objective_trace.last().map_or(f64::NAN, |b| b.fidelity),
        })
        .collect();
    let best = Engine::best_index(&scores);

    io::ensure_dir(&cfg.out)?;
    let tuning = io::write_tuning(&cfg.out, &rows)?;
    let (fit_path, curves, components, _) =
        write_fit_artifacts(&engine, &fits[best], meta.seed, &cfg.out)?;
    let summary = format!(
        "tuned {} penalty levels, best lambda_gamma={} (score {:.6}) -> {}",
        grid.len(),
        grid[best],
        scores[best],
        tuning.display()
    );
    Ok(TuneArtifacts {
        tuning,
        fit: fit_path,
        curves,
        components,
        rows,
        best_lambda: grid[best],
        summary,
    })
}

#[derive(Debug)]
pub struct EvaluateArtifacts {
    pub eval: PathBuf,
    pub report: EvalReport,
    pub summary: String,
}

/// Score a saved fit against a saved truth, rebuilding the engine from
/// the dataset the fit was produced on.
pub fn cmd_evaluate(
    fit_path: &Path,
    truth_path: &Path,
    data: &Path,
    cfg: &ExperimentConfig,
) -> Result<EvaluateArtifacts, CliError> {
    let doc = io::read_fit(fit_path)?;
    let truth = io::read_truth(truth_path)?;
    let (dataset, _) = io::read_dataset(data)?;
    let engine = Engine::new(dataset, doc.config)?;
    if engine.latent_basis().knots() != doc.latent_basis.knots.as_slice() {
        return Err(CliError::Data(format!(
            "fit document {} was not produced on dataset {}: latent bases differ",
            fit_path.display(),
            data.display()
        )));
    }
    let fit = io::fit_from_document(&doc);
    let report = evaluate(&engine, &fit, &truth)?;
    io::ensure_dir(&cfg.out)?;
    let eval = io::write_eval(&cfg.out, &report)?;
    let summary = format!(
        "evaluated mse_latent={:.6} mse_deriv={:.6} tp={:.1} fp={:.1} -> {}",
        report.mse_latent,
        report.mse_deriv,
        report.tp_rate,
        report.fp_rate,
        eval.display()
    );
    Ok(EvaluateArtifacts { eval, report, summary })
}

#[derive(Debug)]
pub struct ReplicateArtifacts {
    pub results: PathBuf,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(u64, String)>,
    pub summary: String,
}

fn replicate_one(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ResultRow>, CliError> {
    let truth = build_truth(cfg.preset, seed)?;
    let traj = truth.solve(DEFAULT_STEP)?;
    let snr = cfg.resolved_snr();
    let (dataset, _) =
        sample_dataset(&traj, truth.family, cfg.n, cfg.resolved_replicates(), snr, seed)?;
    let engine = Engine::new(dataset, cfg.jade)?;
    let mut rows = Vec::with_capacity(2);
    for method in [Method::Jade, Method::TwoStage] {
        let fit = fit_with(&engine, cfg, method)?;
        let report = evaluate(&engine, &fit, &truth)?;
        rows.push(ResultRow {
            method,
            family: cfg.preset.name().to_string(),
            n: cfg.n,
            snr,
            seed,
            report,
        });
    }
    Ok(rows)
}

/// The full study: per seed simulate, tune, fit, and evaluate both
/// methods, then write the aggregated table. Seeds run concurrently;
/// failed seeds are reported and excluded, and more than 20% of them
/// failing is an error.
pub fn cmd_replicate(cfg: &ExperimentConfig) -> Result<ReplicateArtifacts, CliError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let outcomes: Vec<(u64, Result<Vec<ResultRow>, CliError>)> =
        seeds.par_iter().map(|&s| (s, replicate_one(cfg, s))).collect();

    let mut by_seed: Vec<Vec<ResultRow>> = Vec::new();
    let mut failures: Vec<(u64, String)> = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(rows) => by_seed.push(rows),
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if by_seed.is_empty() {
        let (seed, msg) = failures.first().expect("at least one seed ran");
        return Err(CliError::Numeric(format!("every replication failed; seed {seed}: {msg}")));
    }

    // Group rows by method, seeds in ascending order within each group.
    let mut rows: Vec<ResultRow> = Vec::new();
    for method in [Method::Jade, Method::TwoStage] {
        for seed_rows in &by_seed {
            rows.extend(seed_rows.iter().filter(|r| r.method == method).cloned());
        }
    }

    io::ensure_dir(&cfg.out)?;
    let results = cfg.out.join("results.csv");
    io::write_results(&results, &rows)?;
    let summary = format!(
        "replicated {} of {} seeds ({} methods) -> {}",
        by_seed.len(),
        seeds.len(),
        2,
        results.display()
    );
    if failures.len() * 5 > seeds.len() {
        return Err(CliError::Numeric(format!(
            "{} of {} replications failed; first failure at seed {}: {}",
            failures.len(),
            seeds.len(),
            failures[0].0,
            failures[0].1
        )));
    }
    Ok(ReplicateArtifacts { results, rows, failures, summary })
}
