//! Experiment harness: scenario execution, result files, and parameter
//! sweeps, driven by one JSON config per invocation.
//!
//! `run` executes a scenario and writes `results.csv` plus `summary.json`
//! into the output directory. `sweep` repeats the scenario across parameter
//! values, merges the rows, adds cross-run verdicts, and draws `chart.svg`.
//! Every value column is reproducible seed-for-seed; only `runtime_ms`
//! reflects the actual wall clock.

mod chart;
pub mod config;
pub mod report;
mod scenarios;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ContinuumSpec, ExperimentConfig, HarmonicDensity, Scenario, SolverSpec, TimeGridSpec};
pub use report::{AssertionResult, ResultRow, CSV_HEADER};

use crate::error::{Error, Result};
use report::{RunSummary, SweepRunEntry, SweepSummary};

/// Outcome of a `run` or `sweep`: where the files went and whether every
/// assertion held.
#[derive(Debug)]
pub struct Artifacts {
    pub out_dir: PathBuf,
    pub passed: bool,
    pub rows: usize,
    pub failed_assertions: Vec<String>,
}

fn resolve_out_dir(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> PathBuf {
    if let Some(dir) = override_dir {
        return dir.to_path_buf();
    }
    match &cfg.out_dir {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from("out"),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn failed_names(assertions: &[AssertionResult]) -> Vec<String> {
    assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| a.name.clone())
        .collect()
}

/// Executes the configured scenario and writes `results.csv` and
/// `summary.json`. The summary's verdicts are a function of the emitted rows
/// and the configured thresholds only.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    override_dir: Option<&Path>,
    verbose: bool,
) -> Result<Artifacts> {
    cfg.validate()?;
    let out_dir = resolve_out_dir(cfg, override_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    if verbose {
        eprintln!("running scenario {} ({})", cfg.scenario.name(), cfg.name);
    }
    let rows = scenarios::execute(cfg, verbose)?;
    let assertions = report::evaluate_run(cfg.scenario, cfg.threshold, &rows);
    let passed = assertions.iter().all(|a| a.passed);

    write_file(&out_dir.join("results.csv"), &report::to_csv(&rows))?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        scenario: cfg.scenario.name().to_string(),
        passed,
        row_count: rows.len(),
        assertions: assertions.clone(),
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    write_file(&out_dir.join("summary.json"), &summary_json)?;

    Ok(Artifacts {
        out_dir,
        passed,
        rows: rows.len(),
        failed_assertions: failed_names(&assertions),
    })
}

/// Returns a copy of the config with one sweep parameter replaced. The
/// parameter must already play a role in the base config.
pub fn apply_sweep_value(
    cfg: &ExperimentConfig,
    param: &str,
    value: u64,
) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match param {
        "N" => {
            if cfg.n_list.is_empty() {
                return Err(Error::Config(
                    "sweep parameter N: the config has no n_list to replace".into(),
                ));
            }
            out.n_list = vec![value as usize];
        }
        "G" | "grid_size" => {
            if cfg.continuum.is_none() {
                return Err(Error::Config(format!(
                    "sweep parameter {param}: the config has no continuum system"
                )));
            }
            out.grid_size = Some(value as usize);
        }
        "tree_cap" => {
            if cfg.tree_cap.is_none() {
                return Err(Error::Config(
                    "sweep parameter tree_cap: the config does not set tree_cap".into(),
                ));
            }
            out.tree_cap = Some(value as usize);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other}; expected N, G/grid_size or tree_cap"
            )));
        }
    }
    out.validate()?;
    Ok(out)
}

/// Runs the scenario once per parameter value, merges all rows into one
/// `results.csv`, evaluates cross-run trend assertions, and draws a line
/// chart of the sweep's headline metric.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[u64],
    override_dir: Option<&Path>,
    verbose: bool,
) -> Result<Artifacts> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let out_dir = resolve_out_dir(cfg, override_dir);
    fs::create_dir_all(&out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut runs: Vec<(u64, Vec<ResultRow>)> = Vec::with_capacity(values.len());
    let mut entries: Vec<SweepRunEntry> = Vec::with_capacity(values.len());
    for &v in values {
        let cfg_v = apply_sweep_value(cfg, param, v)?;
        if verbose {
            eprintln!("sweep {param}={v}: running {}", cfg_v.scenario.name());
        }
        let rows = scenarios::execute(&cfg_v, verbose)?;
        let assertions = report::evaluate_run(cfg_v.scenario, cfg_v.threshold, &rows);
        entries.push(SweepRunEntry {
            value: v,
            passed: assertions.iter().all(|a| a.passed),
            assertions,
        });
        runs.push((v, rows));
    }

    let sweep_assertions = report::evaluate_sweep(cfg.scenario, param, &runs);
    let passed =
        entries.iter().all(|e| e.passed) && sweep_assertions.iter().all(|a| a.passed);

    let merged: Vec<ResultRow> = runs.iter().flat_map(|(_, rows)| rows.clone()).collect();
    write_file(&out_dir.join("results.csv"), &report::to_csv(&merged))?;

    let metric = report::chart_metric(cfg.scenario, param);
    let points: Vec<(f64, f64)> = report::sweep_points(&runs, metric)
        .into_iter()
        .filter_map(|(v, m)| m.map(|m| (v as f64, m)))
        .collect();
    let svg = chart::line_chart_svg(
        &format!("{}: {} vs {}", cfg.name, metric, param),
        param,
        metric,
        &points,
    );
    write_file(&out_dir.join("chart.svg"), &svg)?;

    let mut failures: Vec<String> = Vec::new();
    for e in &entries {
        for a in &e.assertions {
            if !a.passed {
                failures.push(format!("{param}={}: {}", e.value, a.name));
            }
        }
    }
    failures.extend(failed_names(&sweep_assertions));

    let summary = SweepSummary {
        name: cfg.name.clone(),
        scenario: cfg.scenario.name().to_string(),
        parameter: param.to_string(),
        values: values.to_vec(),
        passed,
        row_count: merged.len(),
        runs: entries,
        sweep_assertions,
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    write_file(&out_dir.join("summary.json"), &summary_json)?;

    Ok(Artifacts {
        out_dir,
        passed,
        rows: merged.len(),
        failed_assertions: failures,
    })
}
