//! End-to-end checks: the command functions against real files, and the
//! installed binary for flag parsing and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jade_cli::commands::{cmd_evaluate, cmd_fit, cmd_replicate, cmd_simulate, cmd_tune};
use jade_cli::config::ExperimentConfig;
use jade_cli::io;
use jade_core::engine::{Engine, LambdaGamma, Method};
use tempfile::TempDir;

/// Small instance that still exercises the whole pipeline: ten
/// processes, two dozen times, two outer rounds.
fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.n = 24;
    cfg.seed = 7;
    cfg.jade.quad_nodes = 151;
    cfg.jade.max_outer = 2;
    cfg.jade.lambda_gamma = LambdaGamma::Value(0.2);
    cfg.out = out.to_path_buf();
    cfg
}

fn jade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jade")).args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulated_datasets_are_accepted_by_fit_unchanged() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = cmd_simulate(&cfg).unwrap();
    assert!(sim.dataset.is_file() && sim.meta.is_file() && sim.truth.is_file());

    let fit = cmd_fit(&sim.dataset, &cfg, Method::TwoStage).unwrap();
    assert!(fit.fit.is_file() && fit.curves.is_file() && fit.components.is_file());

    // The fit document echoes the effective engine config and the data
    // provenance seed.
    assert_eq!(fit.document.config, cfg.jade);
    assert_eq!(fit.document.seed, Some(cfg.seed));

    // curves.csv holds every process on the standard grid.
    let curves = fs::read_to_string(&fit.curves).unwrap();
    assert_eq!(curves.lines().count(), 1 + 10 * 401);
    assert!(curves.starts_with("time,process,theta,dtheta\n"));

    // components.csv holds every ordered pair.
    let comps = fs::read_to_string(&fit.components).unwrap();
    assert_eq!(comps.lines().count(), 1 + 10 * 10 * io::COMPONENT_POINTS);
}

#[test]
fn joint_fits_reach_a_lower_objective_than_two_stage() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.jade.max_outer = 4;
    let sim = cmd_simulate(&cfg).unwrap();

    let two = cmd_fit(&sim.dataset, &cfg, Method::TwoStage).unwrap();
    let joint_out = tmp.path().join("joint");
    cfg.out = joint_out;
    let joint = cmd_fit(&sim.dataset, &cfg, Method::Jade).unwrap();

    // Compare both states under the same unweighted joint objective.
    let (dataset, _) = io::read_dataset(&sim.dataset).unwrap();
    let engine = Engine::new(dataset, cfg.jade).unwrap();
    let lambda = 0.2;
    let q_two = engine.objective(&two.document.state, lambda).unwrap().total;
    let q_joint = engine.objective(&joint.document.state, lambda).unwrap().total;
    assert!(
        q_joint <= q_two + 1e-9,
        "joint objective {q_joint} exceeds two-stage objective {q_two}"
    );
}

#[test]
fn an_overwhelming_penalty_empties_the_network() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = cmd_simulate(&cfg).unwrap();

    let out = jade(&[
        "fit",
        sim.dataset.to_str().unwrap(),
        "--lambda-gamma",
        "1e9",
        "--method",
        "jade",
        "--out",
        tmp.path().join("empty").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "fit failed: {}", stderr_of(&out));

    let doc = io::read_fit(&tmp.path().join("empty").join("fit.json")).unwrap();
    assert_eq!(doc.selected_lambda_gamma, 1e9);
    assert!(doc.adjacency.iter().flatten().all(|&a| !a), "expected an empty network");
}

#[test]
fn flags_override_the_config_document_and_are_echoed() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = cmd_simulate(&cfg).unwrap();

    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out_dir = tmp.path().join("override");
    let out = jade(&[
        "fit",
        sim.dataset.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--lambda-theta",
        "2.5",
        "--lambda-gamma",
        "0.4",
        "--method",
        "twostage",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "fit failed: {}", stderr_of(&out));

    let doc = io::read_fit(&out_dir.join("fit.json")).unwrap();
    assert_eq!(doc.config.lambda_theta, 2.5);
    assert_eq!(doc.config.lambda_gamma, LambdaGamma::Value(0.4));
    assert_eq!(doc.method, Method::TwoStage);
}

#[test]
fn tuning_writes_one_row_per_grid_value_and_keeps_the_minimum() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.lambda_grid.values = Some(vec![0.02, 0.2, 0.8]);
    let sim = cmd_simulate(&cfg).unwrap();

    let tuned = cmd_tune(&sim.dataset, &cfg, Method::Jade).unwrap();
    assert_eq!(tuned.rows.len(), 3);
    let best_score =
        tuned.rows.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let best_row =
        tuned.rows.iter().find(|r| r.lambda_gamma == tuned.best_lambda).unwrap();
    assert_eq!(best_row.score, best_score);

    // The written table parses back to the in-memory rows.
    let text = fs::read_to_string(&tuned.tuning).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda_gamma,score,nnz,fidelity");
    assert_eq!(lines.len(), 4);
    for (line, row) in lines[1..].iter().zip(&tuned.rows) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0].parse::<f64>().unwrap(), row.lambda_gamma);
        assert_eq!(cells[1].parse::<f64>().unwrap(), row.score);
        assert_eq!(cells[2].parse::<usize>().unwrap(), row.nnz);
    }

    // An independent engine pass lands on the same winner.
    let (dataset, _) = io::read_dataset(&sim.dataset).unwrap();
    let engine = Engine::new(dataset, cfg.jade).unwrap();
    let (best, _) = engine.tune(&[0.02, 0.2, 0.8], Method::Jade).unwrap();
    assert_eq!(best, tuned.best_lambda);

    // A one-point grid gives a one-row table.
    let mut single = cfg.clone();
    single.lambda_grid.values = Some(vec![0.3]);
    single.out = tmp.path().join("single");
    let tuned = cmd_tune(&sim.dataset, &single, Method::TwoStage).unwrap();
    assert_eq!(tuned.rows.len(), 1);
    assert_eq!(tuned.best_lambda, 0.3);
}

#[test]
fn saved_fits_evaluate_against_saved_truths() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = cmd_simulate(&cfg).unwrap();
    let fit = cmd_fit(&sim.dataset, &cfg, Method::Jade).unwrap();

    let evaluated = cmd_evaluate(&fit.fit, &sim.truth, &sim.dataset, &cfg).unwrap();
    assert!(evaluated.eval.is_file());
    assert!(evaluated.report.mse_latent.is_finite());
    assert!(evaluated.report.mse_deriv.is_finite());
    assert!((0.0..=100.0).contains(&evaluated.report.tp_rate));
    assert!((0.0..=100.0).contains(&evaluated.report.fp_rate));

    // A dataset with a different time grid cannot host this fit.
    let mut other = cfg.clone();
    other.n = 30;
    other.out = tmp.path().join("other");
    let sim2 = cmd_simulate(&other).unwrap();
    let err = cmd_evaluate(&fit.fit, &sim2.truth, &sim2.dataset, &other).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("latent bases differ"), "got: {err}");
}

#[test]
fn replication_tables_rerun_byte_identically() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.n = 20;
    cfg.seeds = 2;
    cfg.jade.quad_nodes = 101;
    cfg.out = tmp.path().join("a");

    let first = cmd_replicate(&cfg).unwrap();
    assert!(first.failures.is_empty(), "failures: {:?}", first.failures);
    // Two methods, each with two seed rows and one summary row.
    assert_eq!(first.rows.len(), 4);
    let text = fs::read_to_string(&first.results).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * (2 + 1));
    let summaries: Vec<&str> =
        text.lines().filter(|l| l.contains("summary")).collect();
    assert_eq!(summaries.len(), 2);

    cfg.out = tmp.path().join("b");
    let second = cmd_replicate(&cfg).unwrap();
    assert_eq!(
        fs::read(&first.results).unwrap(),
        fs::read(&second.results).unwrap(),
        "replication tables differ between identical runs"
    );
}

#[test]
fn corrupt_datasets_are_rejected_with_the_offending_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = cmd_simulate(&cfg).unwrap();

    // Duplicate the first data row at the end of the file.
    let text = fs::read_to_string(&sim.dataset).unwrap();
    let dup = text.lines().nth(1).unwrap();
    let total = text.lines().count();
    fs::write(&sim.dataset, format!("{text}{dup}\n")).unwrap();

    let out = jade(&["fit", sim.dataset.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_of(&out);
    assert!(
        err.contains(&format!("line {}", total + 1)),
        "missing offending line in: {err}"
    );
}

#[test]
fn usage_errors_exit_with_code_two() {
    // Unparsable flag value.
    let out = jade(&["fit", "data.csv", "--lambda-gamma", "nope"]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown key in the config document.
    let tmp = TempDir::new().unwrap();
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, r#"{"n": 24, "lambda": 3}"#).unwrap();
    let out = jade(&["simulate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("lambda"), "got: {}", stderr_of(&out));

    // Invalid engine setting reached through the document.
    fs::write(&cfg_path, r#"{"jade": {"lambda_theta": -1.0}}"#).unwrap();
    let out = jade(&["simulate", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let tmp = TempDir::new().unwrap();
    let ghost = tmp.path().join("ghost.csv");
    let out = jade(&["fit", ghost.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_of(&out).contains("sidecar"), "got: {}", stderr_of(&out));
}
