//! Result rows, the CSV layout, and the assertion verdicts derived from them.
//!
//! Verdicts are computed from the emitted rows alone (plus configured
//! thresholds), so a summary can be recomputed offline from results.csv.

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::Scenario;

pub const CSV_HEADER: &str = "scenario,N,t,metric,value,runtime_ms,seed";

/// Relative gap allowed between the solver and the exact transport cost in
/// the degenerate all-ones scenario.
pub const REL_W1_TOL: f64 = 1e-3;
/// Direct objective at a known permutation coupling must vanish to this level.
pub const PERM_OBJECTIVE_TOL: f64 = 1e-12;
/// Solver value allowed on permutation-equivalent inputs.
pub const PERM_SOLVER_TOL: f64 = 1e-3;
/// Multiplicative noise band for "non-increasing" trend checks.
pub const TREND_BAND: f64 = 0.10;
/// Floating-point slack for inequality margins that should be nonnegative.
pub const MARGIN_SLACK: f64 = 1e-12;
/// Default bound on the final particle-vs-PDE observable distance.
pub const DEFAULT_ENDPOINT_THRESHOLD: f64 = 0.05;
/// Acceptable range for the first-order error ratio when the grid doubles.
pub const TRANSLATION_RATIO_LO: f64 = 1.6;
pub const TRANSLATION_RATIO_HI: f64 = 2.4;

#[derive(Clone, Debug)]
pub struct ResultRow {
    pub scenario: String,
    pub n: String,
    pub t: f64,
    pub metric: String,
    pub value: f64,
    pub runtime_ms: u64,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(
        scenario: Scenario,
        n: impl Into<String>,
        t: f64,
        metric: impl Into<String>,
        value: f64,
        runtime_ms: u64,
        seed: u64,
    ) -> Result<ResultRow> {
        if !value.is_finite() {
            return Err(Error::Numerics(format!(
                "scenario {} produced a non-finite value for metric {}",
                scenario.name(),
                metric.into()
            )));
        }
        Ok(ResultRow {
            scenario: scenario.name().to_string(),
            n: n.into(),
            t,
            metric: metric.into(),
            value,
            runtime_ms,
            seed,
        })
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scenario, self.n, self.t, self.metric, self.value, self.runtime_ms, self.seed
        )
    }
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

impl AssertionResult {
    fn new(name: &str, passed: bool, details: String) -> AssertionResult {
        AssertionResult {
            name: name.to_string(),
            passed,
            details,
        }
    }
}

/// Values of one metric in emission order.
pub fn metric_series(rows: &[ResultRow], metric: &str) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| r.value)
        .collect()
}

fn fmt_series(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn max_value(values: &[f64]) -> f64 {
    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Every consecutive step may rise by at most the noise band.
fn non_increasing_within_band(values: &[f64]) -> bool {
    values
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + TREND_BAND) + MARGIN_SLACK)
}

fn bound_assertion(name: &str, rows: &[ResultRow], metric: &str, bound: f64) -> AssertionResult {
    let values = metric_series(rows, metric);
    if values.is_empty() {
        return AssertionResult::new(name, false, format!("no {metric} rows were emitted"));
    }
    let worst = max_value(&values);
    AssertionResult::new(
        name,
        worst <= bound,
        format!("max {metric} = {worst:.3e}, bound {bound:.3e} over {} rows", values.len()),
    )
}

fn margin_assertion(name: &str, rows: &[ResultRow], metric: &str) -> AssertionResult {
    let values = metric_series(rows, metric);
    if values.is_empty() {
        return AssertionResult::new(name, false, format!("no {metric} rows were emitted"));
    }
    let worst = values.iter().cloned().fold(f64::INFINITY, f64::min);
    AssertionResult::new(
        name,
        worst >= -MARGIN_SLACK,
        format!(
            "min {metric} = {worst:.3e} over {} rows (must stay nonnegative)",
            values.len()
        ),
    )
}

/// Trend over a series: non-increasing within the band, plus an optional
/// overall-drop factor (`last <= first / factor`).
fn trend_assertion(
    name: &str,
    rows: &[ResultRow],
    metric: &str,
    drop_factor: Option<f64>,
) -> AssertionResult {
    let values = metric_series(rows, metric);
    if values.is_empty() {
        return AssertionResult::new(name, false, format!("no {metric} rows were emitted"));
    }
    if values.len() == 1 {
        return AssertionResult::new(
            name,
            true,
            format!("single {metric} point {:.6}, no trend to check", values[0]),
        );
    }
    let band_ok = non_increasing_within_band(&values);
    let (drop_ok, drop_note) = match drop_factor {
        Some(f) => {
            let ok = *values.last().unwrap() <= values[0] / f;
            (ok, format!(", overall drop factor required {f:.2}"))
        }
        None => (values.last().unwrap() < &values[0], String::new()),
    };
    AssertionResult::new(
        name,
        band_ok && drop_ok,
        format!(
            "{metric} series {}{drop_note} (band {}%)",
            fmt_series(&values),
            (TREND_BAND * 100.0) as u32
        ),
    )
}

/// Verdicts for a single scenario run.
pub fn evaluate_run(
    scenario: Scenario,
    threshold: Option<f64>,
    rows: &[ResultRow],
) -> Vec<AssertionResult> {
    match scenario {
        Scenario::DegenerateW1 => vec![bound_assertion(
            "solver_matches_exact_w1",
            rows,
            "relative_gap",
            REL_W1_TOL,
        )],
        Scenario::PermutationZero => vec![
            bound_assertion(
                "objective_vanishes_at_permutation",
                rows,
                "objective_at_permutation",
                PERM_OBJECTIVE_TOL,
            ),
            bound_assertion(
                "solver_detects_relabeling",
                rows,
                "solver_value",
                PERM_SOLVER_TOL,
            ),
            bound_assertion(
                "solver_detects_identity",
                rows,
                "solver_value_identical",
                PERM_SOLVER_TOL,
            ),
        ],
        Scenario::Compactness => {
            let mut out = vec![trend_assertion(
                "sampling_distance_decreases",
                rows,
                "sample_to_lift_distance",
                None,
            )];
            if !metric_series(rows, "consecutive_distance").is_empty() {
                out.push(trend_assertion(
                    "consecutive_samples_approach",
                    rows,
                    "consecutive_distance",
                    None,
                ));
            }
            out
        }
        Scenario::Stability => vec![trend_assertion(
            "endpoint_distance_shrinks",
            rows,
            "observable_metric_mean",
            Some(2.0),
        )],
        Scenario::RegularityCheck => vec![margin_assertion(
            "residual_below_partition_bound",
            rows,
            "regularity_margin",
        )],
        Scenario::CountingCheck => vec![margin_assertion(
            "counting_inequality_holds",
            rows,
            "counting_margin",
        )],
        Scenario::PdeParticleConsistency => {
            let bound = threshold.unwrap_or(DEFAULT_ENDPOINT_THRESHOLD);
            let values = metric_series(rows, "observable_metric");
            let final_check = match values.last() {
                None => AssertionResult::new(
                    "endpoint_metric_below_threshold",
                    false,
                    "no observable_metric rows were emitted".into(),
                ),
                Some(&last) => AssertionResult::new(
                    "endpoint_metric_below_threshold",
                    last <= bound,
                    format!("final observable_metric = {last:.6}, threshold {bound}"),
                ),
            };
            let mut out = vec![final_check];
            if values.len() > 1 {
                out.push(trend_assertion(
                    "endpoint_metric_trend",
                    rows,
                    "observable_metric",
                    None,
                ));
            }
            out
        }
    }
}

/// Metric a sweep should chart for a given scenario and swept parameter.
pub fn chart_metric(scenario: Scenario, param: &str) -> &'static str {
    if scenario == Scenario::PdeParticleConsistency && (param == "G" || param == "grid_size") {
        return "translation_l1";
    }
    primary_metric(scenario)
}

pub fn primary_metric(scenario: Scenario) -> &'static str {
    match scenario {
        Scenario::DegenerateW1 => "relative_gap",
        Scenario::PermutationZero => "solver_value",
        Scenario::Compactness => "sample_to_lift_distance",
        Scenario::Stability => "observable_metric_mean",
        Scenario::RegularityCheck => "residual_cut_norm",
        Scenario::CountingCheck => "counting_margin",
        Scenario::PdeParticleConsistency => "observable_metric",
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Per-value aggregate of one metric across the sweep's runs.
pub fn sweep_points(
    runs: &[(u64, Vec<ResultRow>)],
    metric: &str,
) -> Vec<(u64, Option<f64>)> {
    runs.iter()
        .map(|(v, rows)| (*v, mean(&metric_series(rows, metric))))
        .collect()
}

/// Cross-run verdicts for a sweep, keyed by scenario and swept parameter.
pub fn evaluate_sweep(
    scenario: Scenario,
    param: &str,
    runs: &[(u64, Vec<ResultRow>)],
) -> Vec<AssertionResult> {
    let aggregated = |metric: &str| -> Option<Vec<f64>> {
        let pts = sweep_points(runs, metric);
        pts.iter().map(|(_, v)| *v).collect::<Option<Vec<f64>>>()
    };

    match (scenario, param) {
        (Scenario::Compactness, "N") => {
            let name = "sweep_sampling_distance_decreases";
            match aggregated("sample_to_lift_distance") {
                None => vec![AssertionResult::new(
                    name,
                    false,
                    "some runs emitted no sample_to_lift_distance rows".into(),
                )],
                Some(values) => {
                    let ok = values.len() < 2
                        || (non_increasing_within_band(&values)
                            && values.last().unwrap() < &values[0]);
                    vec![AssertionResult::new(
                        name,
                        ok,
                        format!("per-size means {}", fmt_series(&values)),
                    )]
                }
            }
        }
        (Scenario::Stability, "N") | (Scenario::PdeParticleConsistency, "N") => {
            let metric = primary_metric(scenario);
            let name = "sweep_endpoint_distance_non_increasing";
            match aggregated(metric) {
                None => vec![AssertionResult::new(
                    name,
                    false,
                    format!("some runs emitted no {metric} rows"),
                )],
                Some(values) => vec![AssertionResult::new(
                    name,
                    non_increasing_within_band(&values),
                    format!("per-size means {}", fmt_series(&values)),
                )],
            }
        }
        (Scenario::PdeParticleConsistency, "G") | (Scenario::PdeParticleConsistency, "grid_size") => {
            let name = "sweep_translation_error_halves";
            match aggregated("translation_l1") {
                None => vec![AssertionResult::new(
                    name,
                    false,
                    "no translation_l1 rows; this sweep needs constant drift, \
                     zero interaction and nu = 0"
                        .into(),
                )],
                Some(values) => {
                    let ratios: Vec<f64> =
                        values.windows(2).map(|w| w[0] / w[1]).collect();
                    let ok = !ratios.is_empty()
                        && ratios
                            .iter()
                            .all(|&r| (TRANSLATION_RATIO_LO..=TRANSLATION_RATIO_HI).contains(&r));
                    vec![AssertionResult::new(
                        name,
                        ok,
                        format!(
                            "errors {} with doubling ratios {}",
                            fmt_series(&values),
                            fmt_series(&ratios)
                        ),
                    )]
                }
            }
        }
        (_, "tree_cap") => {
            let metric = primary_metric(scenario);
            let name = "sweep_metric_grows_with_tree_family";
            match aggregated(metric) {
                None => vec![AssertionResult::new(
                    name,
                    false,
                    format!("some runs emitted no {metric} rows"),
                )],
                Some(values) => {
                    let ok = values.windows(2).all(|w| w[1] >= w[0] - MARGIN_SLACK);
                    vec![AssertionResult::new(
                        name,
                        ok,
                        format!("per-cap means {}", fmt_series(&values)),
                    )]
                }
            }
        }
        _ => Vec::new(),
    }
}

#[derive(Serialize)]
pub struct RunSummary {
    pub name: String,
    pub scenario: String,
    pub passed: bool,
    pub row_count: usize,
    pub assertions: Vec<AssertionResult>,
}

#[derive(Serialize)]
pub struct SweepRunEntry {
    pub value: u64,
    pub passed: bool,
    pub assertions: Vec<AssertionResult>,
}

#[derive(Serialize)]
pub struct SweepSummary {
    pub name: String,
    pub scenario: String,
    pub parameter: String,
    pub values: Vec<u64>,
    pub passed: bool,
    pub row_count: usize,
    pub runs: Vec<SweepRunEntry>,
    pub sweep_assertions: Vec<AssertionResult>,
}
