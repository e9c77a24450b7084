//! Result files: JSON for structured results, RFC-4180 CSV (header row,
//! '.' decimal, LF line endings) for plot-ready data. Every file is written
//! to a temporary sibling and renamed into place, so a crash never leaves a
//! half-written artifact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use driftless::dynamics::Trajectory;
use driftless::recovery::NoiseStudyRow;
use driftless::regression::LeastSquaresSolution;
use driftless::scenarios::{FieldOutcome, LinearOutcome, Scenario, ScenarioOutcome};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{RunConfig, SCHEMA_VERSION};

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize)]
struct MatrixReport {
    schema_version: u32,
    rows: usize,
    cols: usize,
    matrix: Vec<Vec<f64>>,
    true_matrix: Vec<Vec<f64>>,
    max_abs_error: f64,
}

#[derive(Serialize)]
struct DriftReport {
    schema_version: u32,
    rows: usize,
    cols: usize,
    matrix: Vec<Vec<f64>>,
    true_matrix: Vec<Vec<f64>>,
    max_abs_error: f64,
    constant_offsets: Vec<f64>,
}

#[derive(Serialize)]
struct SolveStats {
    output: usize,
    rank: usize,
    condition_number: f64,
    residual_norm: f64,
}

#[derive(Serialize)]
struct Diagnostics {
    schema_version: u32,
    scenario: String,
    control: Vec<SolveStats>,
    drift: Vec<SolveStats>,
}

#[derive(Serialize)]
struct CoefficientsReport {
    schema_version: u32,
    basis: String,
    order: usize,
    output_dim: usize,
    input_dim: usize,
    features_per_entry: usize,
    coefficients: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ValidationFile {
    schema_version: u32,
    num_points: usize,
    rmse: Vec<Vec<f64>>,
    max_abs: Vec<Vec<f64>>,
    condition_numbers: Vec<f64>,
    out_of_domain: usize,
}

#[derive(Serialize)]
struct ErrorReport {
    schema_version: u32,
    stage: String,
    message: String,
}

fn solve_stats(solutions: &[LeastSquaresSolution]) -> Vec<SolveStats> {
    solutions
        .iter()
        .enumerate()
        .map(|(output, s)| SolveStats {
            output,
            rank: s.rank,
            condition_number: s.condition_number,
            residual_norm: s.residual_norm,
        })
        .collect()
}

fn push_csv_row(out: &mut String, fields: &[String]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn trajectories_csv(trajectories: &[(usize, &Trajectory)]) -> String {
    let mut out = String::new();
    if let Some((_, first)) = trajectories.first() {
        let n = first.states().ncols();
        let m = first.inputs().ncols();
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("experiment_id".into());
        push_csv_row(&mut out, &header);
        for (id, traj) in trajectories {
            for i in 0..traj.len() {
                let mut row = vec![fmt(traj.times()[i])];
                for j in 0..n {
                    row.push(fmt(traj.states()[(i, j)]));
                }
                for j in 0..m {
                    row.push(fmt(traj.inputs()[(i, j)]));
                }
                row.push(format!("{id}"));
                push_csv_row(&mut out, &row);
            }
        }
    }
    out
}

fn field_samples_csv(scenario: &Scenario, outcome: &FieldOutcome) -> anyhow::Result<String> {
    let n = scenario.system.state_dim();
    let m = scenario.system.input_dim();
    let mut out = String::new();
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.extend([
        "entry_id".into(),
        "true_value".into(),
        "recovered_value".into(),
    ]);
    push_csv_row(&mut out, &header);
    for point in &outcome.validation.sample_points {
        let g_true = scenario
            .system
            .control_matrix(point)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let g_hat = outcome
            .recovered
            .evaluate(point)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        for j in 0..n {
            for s in 0..m {
                let mut row: Vec<String> = (0..n).map(|i| fmt(point[i])).collect();
                row.push(format!("g{}{}", j + 1, s + 1));
                row.push(fmt(g_true[(j, s)]));
                row.push(fmt(g_hat[(j, s)]));
                push_csv_row(&mut out, &row);
            }
        }
    }
    Ok(out)
}

fn convergence_csv(rows: &[NoiseStudyRow]) -> String {
    let mut out = String::new();
    push_csv_row(
        &mut out,
        &[
            "N".into(),
            "median_error".into(),
            "q25".into(),
            "q75".into(),
            "trials".into(),
        ],
    );
    for row in rows {
        push_csv_row(
            &mut out,
            &[
                row.num_perturbations.to_string(),
                fmt(row.median_error),
                fmt(row.q25),
                fmt(row.q75),
                row.trials.to_string(),
            ],
        );
    }
    out
}

/// Write every artifact a finished run produces; returns the paths written.
pub fn emit_reports(
    out_dir: &Path,
    scenario: &Scenario,
    outcome: &ScenarioOutcome,
    config: &RunConfig,
) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let emit_file = |name: &str, bytes: &[u8]| -> anyhow::Result<PathBuf> {
        let path = out_dir.join(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    };

    // Effective config first: it documents the run even if later writes fail.
    let config_path = out_dir.join("effective_config.json");
    write_json(&config_path, config)?;
    written.push(config_path);

    match outcome {
        ScenarioOutcome::Linear(linear) => {
            written.extend(emit_linear(out_dir, scenario, linear, config)?);
        }
        ScenarioOutcome::Field(field) => {
            let coeff_path = out_dir.join("coefficients.json");
            write_json(
                &coeff_path,
                &CoefficientsReport {
                    schema_version: SCHEMA_VERSION,
                    basis: scenario.basis.family().name().to_string(),
                    order: scenario.basis.order(),
                    output_dim: field.recovered.output_dim(),
                    input_dim: field.recovered.input_dim(),
                    features_per_entry: scenario.basis.feature_count(),
                    coefficients: matrix_rows(field.recovered.coefficients()),
                },
            )?;
            written.push(coeff_path);

            let validation_path = out_dir.join("validation_report.json");
            write_json(
                &validation_path,
                &ValidationFile {
                    schema_version: SCHEMA_VERSION,
                    num_points: field.validation.sample_points.len(),
                    rmse: matrix_rows(&field.validation.rmse),
                    max_abs: matrix_rows(&field.validation.max_abs),
                    condition_numbers: field.validation.condition_numbers.clone(),
                    out_of_domain: field.validation.out_of_domain,
                },
            )?;
            written.push(validation_path);

            written.push(emit_file(
                "field_samples.csv",
                field_samples_csv(scenario, field)?.as_bytes(),
            )?);

            let diag_path = out_dir.join("diagnostics.json");
            write_json(
                &diag_path,
                &Diagnostics {
                    schema_version: SCHEMA_VERSION,
                    scenario: config.scenario.clone(),
                    control: solve_stats(field.recovered.diagnostics()),
                    drift: field
                        .drift
                        .as_ref()
                        .map(|d| solve_stats(d.diagnostics()))
                        .unwrap_or_default(),
                },
            )?;
            written.push(diag_path);
        }
        ScenarioOutcome::Noise(noise) => {
            written.push(emit_file(
                "convergence.csv",
                convergence_csv(&noise.rows).as_bytes(),
            )?);
            let diag_path = out_dir.join("diagnostics.json");
            write_json(
                &diag_path,
                &Diagnostics {
                    schema_version: SCHEMA_VERSION,
                    scenario: config.scenario.clone(),
                    control: Vec::new(),
                    drift: Vec::new(),
                },
            )?;
            written.push(diag_path);
        }
    }
    Ok(written)
}

fn emit_linear(
    out_dir: &Path,
    _scenario: &Scenario,
    linear: &LinearOutcome,
    config: &RunConfig,
) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let b_path = out_dir.join("recovered_B.json");
    write_json(
        &b_path,
        &MatrixReport {
            schema_version: SCHEMA_VERSION,
            rows: linear.b_hat.nrows(),
            cols: linear.b_hat.ncols(),
            matrix: matrix_rows(&linear.b_hat),
            true_matrix: matrix_rows(&linear.b_true),
            max_abs_error: (&linear.b_hat - &linear.b_true).abs().max(),
        },
    )?;
    written.push(b_path);

    let a_path = out_dir.join("recovered_A.json");
    write_json(
        &a_path,
        &DriftReport {
            schema_version: SCHEMA_VERSION,
            rows: linear.a_hat.nrows(),
            cols: linear.a_hat.ncols(),
            matrix: matrix_rows(&linear.a_hat),
            true_matrix: matrix_rows(&linear.a_true),
            max_abs_error: (&linear.a_hat - &linear.a_true).abs().max(),
            constant_offsets: linear.drift_offsets.iter().cloned().collect(),
        },
    )?;
    written.push(a_path);

    let traj_refs: Vec<(usize, &Trajectory)> = linear.trajectories.iter().enumerate().collect();
    let traj_path = out_dir.join("trajectories.csv");
    write_atomic(&traj_path, trajectories_csv(&traj_refs).as_bytes())?;
    written.push(traj_path);

    let diag_path = out_dir.join("diagnostics.json");
    write_json(
        &diag_path,
        &Diagnostics {
            schema_version: SCHEMA_VERSION,
            scenario: config.scenario.clone(),
            control: solve_stats(&linear.b_diagnostics),
            drift: solve_stats(&linear.a_diagnostics),
        },
    )?;
    written.push(diag_path);

    Ok(written)
}

/// Write the error report of a failed run.
pub fn emit_error_report(out_dir: &Path, stage: &str, message: &str) -> anyhow::Result<PathBuf> {
    let path = out_dir.join("error_report.json");
    write_json(
        &path,
        &ErrorReport {
            schema_version: SCHEMA_VERSION,
            stage: stage.to_string(),
            message: message.to_string(),
        },
    )?;
    Ok(path)
}

/// One-paragraph console summary of a finished run.
pub fn summarize(outcome: &ScenarioOutcome) -> String {
    let mut s = String::new();
    match outcome {
        ScenarioOutcome::Linear(linear) => {
            let _ = writeln!(
                s,
                "recovered B (max |error| {:.3e}):",
                (&linear.b_hat - &linear.b_true).abs().max()
            );
            for i in 0..linear.b_hat.nrows() {
                let row: Vec<String> = (0..linear.b_hat.ncols())
                    .map(|j| format!("{:+.6}", linear.b_hat[(i, j)]))
                    .collect();
                let _ = writeln!(s, "  [{}]", row.join(", "));
            }
            let _ = writeln!(
                s,
                "recovered A (max |error| {:.3e})",
                (&linear.a_hat - &linear.a_true).abs().max()
            );
        }
        ScenarioOutcome::Field(field) => {
            let _ = writeln!(
                s,
                "validated on {} points: max per-entry |error| {:.3e}, worst rmse {:.3e}",
                field.validation.sample_points.len(),
                field.validation.max_abs.max(),
                field.validation.rmse.max()
            );
        }
        ScenarioOutcome::Noise(noise) => {
            for row in &noise.rows {
                let _ = writeln!(
                    s,
                    "N = {:4}: median error {:.4e} (q25 {:.4e}, q75 {:.4e})",
                    row.num_perturbations, row.median_error, row.q25, row.q75
                );
            }
        }
    }
    s
}
