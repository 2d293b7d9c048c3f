//! All on-disk formats: dataset CSV with a metadata sidecar, truth and
//! fit JSON documents, and the plot-ready and results CSV tables.

use std::path::{Path, PathBuf};

use jade_core::data::{Dataset, DatasetMeta, Obs};
use jade_core::engine::{
    Diagnostics, Engine, FitResult, JadeConfig, JadeState, Method, ObjectiveBreakdown,
};
use jade_core::evaluate::{EvalReport, EVAL_NODES};
use jade_core::linalg::trapezoid_rule;
use jade_core::simulate::TruthSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Points per component in the component table.
pub const COMPONENT_POINTS: usize = 201;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {}", dir.display(), e)))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e)))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {}", path.display(), e)))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable document");
    text.push('\n');
    text
}

/// Shortest round-trip decimal form, scientific when shorter.
fn fmt(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float")
}

/// Sidecar path of a dataset CSV: same stem, `.meta.json` extension.
pub fn meta_path_of(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Write `dataset.csv` and `dataset.meta.json` under `dir`. Rows are
/// ordered by process, then time, then replicate; processes and
/// replicates are 1-based on disk.
pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    meta: &DatasetMeta,
) -> Result<(PathBuf, PathBuf), CliError> {
    let csv_path = dir.join("dataset.csv");
    let meta_path = meta_path_of(&csv_path);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "process", "replicate", "value"]).expect("in-memory write");
    for (j, rows) in dataset.processes.iter().enumerate() {
        for o in rows {
            w.write_record([
                fmt(dataset.times[o.time_idx]),
                (j + 1).to_string(),
                (o.replicate + 1).to_string(),
                fmt(o.value),
            ])
            .expect("in-memory write");
        }
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(&csv_path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", csv_path.display(), e)))?;
    write_text(&meta_path, &to_json_pretty(meta))?;
    Ok((csv_path, meta_path))
}

/// Read a dataset CSV plus its metadata sidecar and validate both. Parse
/// and consistency problems report the offending CSV line.
pub fn read_dataset(csv_path: &Path) -> Result<(Dataset, DatasetMeta), CliError> {
    let meta_path = meta_path_of(csv_path);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| {
        CliError::Data(format!(
            "missing metadata sidecar {}: {}",
            meta_path.display(),
            e
        ))
    })?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| CliError::Data(format!("invalid metadata {}: {}", meta_path.display(), e)))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {}", csv_path.display(), e)))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| CliError::Data(format!("{}: {}", csv_path.display(), e)))?;
        let expected = ["time", "process", "replicate", "value"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(CliError::Data(format!(
                "{}: header must be time,process,replicate,value, got {}",
                csv_path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    struct Row {
        line: u64,
        time: f64,
        process: usize,
        replicate: u32,
        value: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| CliError::Data(format!("{}: {}", csv_path.display(), e)))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |field: &str, text: &str| {
            CliError::Data(format!(
                "{} line {}: invalid {} {:?}",
                csv_path.display(),
                line,
                field,
                text
            ))
        };
        if record.len() != 4 {
            return Err(CliError::Data(format!(
                "{} line {}: expected 4 fields, got {}",
                csv_path.display(),
                line,
                record.len()
            )));
        }
        let time: f64 = record[0].parse().map_err(|_| bad("time", &record[0]))?;
        let process: usize = record[1].parse().map_err(|_| bad("process", &record[1]))?;
        let replicate: u32 = record[2].parse().map_err(|_| bad("replicate", &record[2]))?;
        let value: f64 = record[3].parse().map_err(|_| bad("value", &record[3]))?;
        if !time.is_finite() {
            return Err(bad("time", &record[0]));
        }
        if process == 0 {
            return Err(bad("process", &record[1]));
        }
        if replicate == 0 {
            return Err(bad("replicate", &record[2]));
        }
        rows.push(Row { line, time, process, replicate, value });
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", csv_path.display())));
    }

    let p = rows.iter().map(|r| r.process).max().expect("nonempty");
    let mut seen = vec![false; p];
    for r in &rows {
        seen[r.process - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CliError::Data(format!(
            "{}: process indices must be contiguous 1..{}, {} is absent",
            csv_path.display(),
            p,
            missing + 1
        )));
    }

    let mut times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times.dedup();
    if times.len() != meta.n {
        return Err(CliError::Data(format!(
            "{}: {} distinct times but metadata says n={}",
            csv_path.display(),
            times.len(),
            meta.n
        )));
    }

    let mut processes: Vec<Vec<Obs>> = vec![Vec::new(); p];
    let mut last: Vec<Option<(usize, u32, u64)>> = vec![None; p];
    for r in &rows {
        let idx = times
            .binary_search_by(|t| t.partial_cmp(&r.time).expect("finite times"))
            .expect("time collected above");
        let j = r.process - 1;
        if let Some((prev_idx, prev_rep, prev_line)) = last[j] {
            if (idx, r.replicate) == (prev_idx, prev_rep) {
                return Err(CliError::Data(format!(
                    "{} line {}: duplicate (time, process, replicate) triple, first seen on line {}",
                    csv_path.display(),
                    r.line,
                    prev_line
                )));
            }
            if (idx, r.replicate) < (prev_idx, prev_rep) {
                return Err(CliError::Data(format!(
                    "{} line {}: rows of process {} must be sorted by time then replicate",
                    csv_path.display(),
                    r.line,
                    r.process
                )));
            }
        }
        last[j] = Some((idx, r.replicate, r.line));
        processes[j].push(Obs { time_idx: idx, replicate: r.replicate - 1, value: r.value });
    }

    let dataset =
        Dataset { times, t_span: meta.t_span, family: meta.family, processes };
    dataset.validate()?;
    Ok((dataset, meta))
}

pub fn write_truth(dir: &Path, truth: &TruthSpec) -> Result<PathBuf, CliError> {
    let path = dir.join("truth.json");
    write_text(&path, &to_json_pretty(truth))?;
    Ok(path)
}

pub fn read_truth(path: &Path) -> Result<TruthSpec, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Data(format!("invalid truth document {}: {}", path.display(), e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisInfo {
    pub degree: usize,
    pub knots: Vec<f64>,
}

/// Complete fit record: enough to reproduce every fitted curve (bases
/// and coefficients), plus provenance (config echo and data seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub seed: Option<u64>,
    pub config: JadeConfig,
    pub method: Method,
    pub selected_lambda_gamma: f64,
    pub latent_basis: BasisInfo,
    /// Inner spline of the warped component basis, defined on (0, 1).
    pub component_basis: BasisInfo,
    pub state: JadeState,
    pub adjacency: Vec<Vec<bool>>,
    pub objective_trace: Vec<ObjectiveBreakdown>,
    pub diagnostics: Diagnostics,
}

pub fn fit_document(engine: &Engine, fit: &FitResult, seed: Option<u64>) -> FitDocument {
    FitDocument {
        seed,
        config: *engine.config(),
        method: fit.method,
        selected_lambda_gamma: fit.selected_lambda_gamma,
        latent_basis: BasisInfo {
            degree: engine.latent_basis().degree(),
            knots: engine.latent_basis().knots().to_vec(),
        },
        component_basis: BasisInfo {
            degree: engine.component_basis().inner().degree(),
            knots: engine.component_basis().inner().knots().to_vec(),
        },
        state: fit.state.clone(),
        adjacency: fit.adjacency.clone(),
        objective_trace: fit.objective_trace.clone(),
        diagnostics: fit.diagnostics.clone(),
    }
}

/// Reassemble the engine-level result held in a fit document.
pub fn fit_from_document(doc: &FitDocument) -> FitResult {
    FitResult {
        state: doc.state.clone(),
        objective_trace: doc.objective_trace.clone(),
        adjacency: doc.adjacency.clone(),
        selected_lambda_gamma: doc.selected_lambda_gamma,
        method: doc.method,
        diagnostics: doc.diagnostics.clone(),
    }
}

pub fn write_fit(dir: &Path, doc: &FitDocument) -> Result<PathBuf, CliError> {
    let path = dir.join("fit.json");
    write_text(&path, &to_json_pretty(doc))?;
    Ok(path)
}

pub fn read_fit(path: &Path) -> Result<FitDocument, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Data(format!("invalid fit document {}: {}", path.display(), e)))
}

/// Fitted latent curves and their derivatives on the standard grid:
/// columns time, process (1-based), theta, dtheta.
pub fn write_curves(dir: &Path, engine: &Engine, state: &JadeState) -> Result<PathBuf, CliError> {
    let path = dir.join("curves.csv");
    let span = engine.dataset().t_span;
    let (ts, _) = trapezoid_rule(span.0, span.1, EVAL_NODES);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "process", "theta", "dtheta"]).expect("in-memory write");
    for j in 0..engine.dataset().p() {
        let theta = engine.latent_curve(state, j, &ts)?;
        let dtheta = engine.latent_deriv_curve(state, j, &ts)?;
        for ((t, v), d) in ts.iter().zip(&theta).zip(&dtheta) {
            w.write_record([fmt(*t), (j + 1).to_string(), fmt(*v), fmt(*d)])
                .expect("in-memory write");
        }
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(&path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e)))?;
    Ok(path)
}

/// Each fitted component sampled over the range its input actually
/// covers: columns equation, process (both 1-based), theta, value.
pub fn write_components(
    dir: &Path,
    engine: &Engine,
    state: &JadeState,
) -> Result<PathBuf, CliError> {
    let path = dir.join("components.csv");
    let span = engine.dataset().t_span;
    let (ts, _) = trapezoid_rule(span.0, span.1, EVAL_NODES);
    let p = engine.dataset().p();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["equation", "process", "theta", "value"]).expect("in-memory write");
    for k in 0..p {
        let vals = engine.latent_curve(state, k, &ts)?;
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let grid: Vec<f64> = (0..COMPONENT_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (COMPONENT_POINTS - 1) as f64)
            .collect();
        for j in 0..p {
            let f = engine.component_curve(state, j, k, &grid)?;
            for (theta, v) in grid.iter().zip(&f) {
                w.write_record([
                    (j + 1).to_string(),
                    (k + 1).to_string(),
                    fmt(*theta),
                    fmt(*v),
                ])
                .expect("in-memory write");
            }
        }
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(&path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e)))?;
    Ok(path)
}

/// One tuning table row: penalty level, selection score, nonzero model
/// coefficients, and the fidelity term of the final objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneRow {
    pub lambda_gamma: f64,
    pub score: f64,
    pub nnz: usize,
    pub fidelity: f64,
}

pub fn write_tuning(dir: &Path, rows: &[TuneRow]) -> Result<PathBuf, CliError> {
    let path = dir.join("tuning.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda_gamma", "score", "nnz", "fidelity"]).expect("in-memory write");
    for r in rows {
        w.write_record([fmt(r.lambda_gamma), fmt(r.score), r.nnz.to_string(), fmt(r.fidelity)])
            .expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(&path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e)))?;
    Ok(path)
}

pub fn write_eval(dir: &Path, report: &EvalReport) -> Result<PathBuf, CliError> {
    let path = dir.join("eval.json");
    write_text(&path, &to_json_pretty(report))?;
    Ok(path)
}

/// One replication outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub family: String,
    pub n: usize,
    pub snr: Option<f64>,
    pub seed: u64,
    pub report: EvalReport,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Jade => "jade",
        Method::TwoStage => "twostage",
    }
}

/// Write the replication table: per-seed rows grouped by method, each
/// group followed by a summary row holding "mean (se)" per metric.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "family",
        "n",
        "snr",
        "seed",
        "mse_latent",
        "mse_deriv",
        "mse_active",
        "mse_inactive",
        "tp",
        "fp",
    ])
    .expect("in-memory write");

    let metrics = |r: &EvalReport| {
        [r.mse_latent, r.mse_deriv, r.mse_active, r.mse_inactive, r.tp_rate, r.fp_rate]
    };
    for method in [Method::Jade, Method::TwoStage] {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method).collect();
        if group.is_empty() {
            continue;
        }
        for r in &group {
            let m = metrics(&r.report);
            let mut record = vec![
                method_name(method).to_string(),
                r.family.clone(),
                r.n.to_string(),
                r.snr.map_or(String::new(), fmt),
                r.seed.to_string(),
            ];
            record.extend(m.iter().map(|v| fmt(*v)));
            w.write_record(&record).expect("in-memory write");
        }
        // Mean and standard error of each metric over the group.
        let count = group.len() as f64;
        let mut record = vec![
            method_name(method).to_string(),
            group[0].family.clone(),
            group[0].n.to_string(),
            group[0].snr.map_or(String::new(), fmt),
            "summary".to_string(),
        ];
        for i in 0..6 {
            let mean = group.iter().map(|r| metrics(&r.report)[i]).sum::<f64>() / count;
            let se = if group.len() < 2 {
                0.0
            } else {
                let var = group
                    .iter()
                    .map(|r| {
                        let d = metrics(&r.report)[i] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / (count - 1.0);
                (var / count).sqrt()
            };
            record.push(format!("{} ({})", fmt(mean), fmt(se)));
        }
        w.write_record(&record).expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use jade_core::expfam::Family;
    use jade_core::simulate::{build_truth, sample_dataset, Preset, DEFAULT_STEP};

    fn sample(seed: u64) -> (Dataset, DatasetMeta) {
        let truth = build_truth(Preset::Poisson, seed).unwrap();
        let traj = truth.solve(DEFAULT_STEP).unwrap();
        let (dataset, _) = sample_dataset(&traj, truth.family, 12, 2, None, seed).unwrap();
        let meta = DatasetMeta {
            family: dataset.family,
            t_span: dataset.t_span,
            n: 12,
            replicates: 2,
            snr: None,
            noise_sd: None,
            seed: Some(seed),
            preset: Some("poisson".into()),
        };
        (dataset, meta)
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, meta) = sample(5);
        let (csv_path, _) = write_dataset(dir.path(), &dataset, &meta).unwrap();
        let (back, meta_back) = read_dataset(&csv_path).unwrap();
        assert_eq!(back, dataset);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn duplicate_rows_are_reported_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, meta) = sample(6);
        let (csv_path, _) = write_dataset(dir.path(), &dataset, &meta).unwrap();
        let mut text = std::fs::read_to_string(&csv_path).unwrap();
        let dup = text.lines().nth(1).unwrap().to_string();
        text.push_str(&dup);
        text.push('\n');
        std::fs::write(&csv_path, text).unwrap();
        let err = read_dataset(&csv_path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "no line number in: {msg}");
        assert!(msg.contains("sorted") || msg.contains("duplicate"), "unexpected: {msg}");
    }

    #[test]
    fn unparsable_fields_are_reported_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        std::fs::write(
            &path,
            "time,process,replicate,value\n0.0,1,1,0.5\nohno,1,2,0.5\n",
        )
        .unwrap();
        let meta = DatasetMeta {
            family: Family::Gaussian,
            t_span: (0.0, 1.0),
            n: 1,
            replicates: 2,
            snr: None,
            noise_sd: None,
            seed: None,
            preset: None,
        };
        std::fs::write(meta_path_of(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        let msg = read_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "missing line number: {msg}");
        assert!(msg.contains("time"), "missing field name: {msg}");
    }

    #[test]
    fn missing_sidecar_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        std::fs::write(&path, "time,process,replicate,value\n0.0,1,1,0.5\n").unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("sidecar"));
    }

    #[test]
    fn noncontiguous_process_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        std::fs::write(
            &path,
            "time,process,replicate,value\n0.0,1,1,0.5\n0.0,3,1,0.5\n1.0,1,1,0.1\n1.0,3,1,0.2\n",
        )
        .unwrap();
        let meta = DatasetMeta {
            family: Family::Gaussian,
            t_span: (0.0, 1.0),
            n: 2,
            replicates: 1,
            snr: None,
            noise_sd: None,
            seed: None,
            preset: None,
        };
        std::fs::write(meta_path_of(&path), serde_json::to_string(&meta).unwrap()).unwrap();
        let msg = read_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("contiguous"), "unexpected: {msg}");
    }

    #[test]
    fn truth_documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let truth = build_truth(Preset::Gaussian, 3).unwrap();
        let path = write_truth(dir.path(), &truth).unwrap();
        assert_eq!(read_truth(&path).unwrap(), truth);
    }

    #[test]
    fn results_table_shape_and_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let report = |x: f64| EvalReport {
            mse_latent: x,
            mse_deriv: 2.0 * x,
            mse_active: 0.0,
            mse_inactive: 0.0,
            tp_rate: 100.0,
            fp_rate: 0.0,
        };
        let rows = vec![
            ResultRow {
                method: Method::Jade,
                family: "gaussian".into(),
                n: 40,
                snr: Some(25.0),
                seed: 1,
                report: report(1.0),
            },
            ResultRow {
                method: Method::Jade,
                family: "gaussian".into(),
                n: 40,
                snr: Some(25.0),
                seed: 2,
                report: report(3.0),
            },
            ResultRow {
                method: Method::TwoStage,
                family: "gaussian".into(),
                n: 40,
                snr: Some(25.0),
                seed: 1,
                report: report(5.0),
            },
        ];
        write_results(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Header, 2 jade rows + summary, 1 twostage row + summary.
        assert_eq!(lines.len(), 6);
        assert!(lines[3].contains("summary"));
        // Mean 2, sd sqrt(2), se 1.
        assert!(lines[3].contains("2.0 (1.0)"), "summary cell wrong: {}", lines[3]);
        assert!(lines[5].contains("5.0 (0.0)"), "singleton group se: {}", lines[5]);
    }
}
