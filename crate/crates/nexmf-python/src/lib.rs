//! Python bindings for the headline operations of the `nexmf` crate.
//!
//! The module stays deliberately thin: plain floats, lists, and dicts in and
//! out, with the numerical work done by the Rust library. Matrices travel as
//! lists of rows.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nexmf::coupling::{circular_w1, solve_bicoupling, SolveConfig};
use nexmf::cutnorm::{cut_norm_exact, cut_norm_heuristic, weak_regularity_partition};
use nexmf::dynamics::{simulate_particles, Coefficients, Drift, Interaction, TimeGrid};
use nexmf::system::{FiniteSystem, System};
use nexmf::torus::{
    h_neg1_dist, lambda_closed, lambda_extrema, torus_dist, AtomicMeasure, MeasureRep,
};
use nexmf::trees::{
    enumerate_trees, homomorphism_density, observable_metric, EdgeSignature, OrientedTree,
};

fn to_py_err(e: nexmf::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn array_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows must all have equal length"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, m), flat)
        .map_err(|e| PyValueError::new_err(format!("bad matrix shape: {e}")))
}

fn finite_system(x: Vec<f64>, w: Vec<Vec<f64>>) -> PyResult<FiniteSystem> {
    FiniteSystem::new(array_from_rows(w)?, x).map_err(to_py_err)
}

fn atomic(positions: Vec<f64>, weights: Vec<f64>) -> PyResult<AtomicMeasure> {
    AtomicMeasure::univariate(&positions, &weights).map_err(to_py_err)
}

fn drift_from_args(kind: &str, param: f64) -> PyResult<Drift> {
    match kind {
        "zero" => Ok(Drift::Zero),
        "constant" => Ok(Drift::Constant { c: param }),
        "sin_drift" => Ok(Drift::SinDrift { a: param }),
        other => Err(PyValueError::new_err(format!(
            "unknown drift {other:?}; expected zero | constant | sin_drift"
        ))),
    }
}

fn interaction_from_args(kind: &str, param: f64) -> PyResult<Interaction> {
    match kind {
        "zero" => Ok(Interaction::Zero),
        "kuramoto" => Ok(Interaction::Kuramoto { k: param }),
        "smooth_bump" => Ok(Interaction::SmoothBump),
        other => Err(PyValueError::new_err(format!(
            "unknown interaction {other:?}; expected zero | kuramoto | smooth_bump"
        ))),
    }
}

/// Distance between two points on the unit circle (shorter arc).
#[pyfunction]
#[pyo3(name = "torus_dist")]
fn torus_dist_py(x: f64, y: f64) -> f64 {
    torus_dist(x, y)
}

/// The interaction kernel Λ evaluated at a torus point (closed form).
#[pyfunction]
fn lambda_kernel(x: f64) -> f64 {
    lambda_closed(x)
}

/// (Λ_max, Λ_min) from the truncated series.
#[pyfunction]
#[pyo3(signature = (truncation = 40))]
fn lambda_range(truncation: u32) -> PyResult<(f64, f64)> {
    let c = lambda_extrema(truncation).map_err(to_py_err)?;
    Ok((c.lambda_max, c.lambda_min))
}

/// H⁻¹ distance between two weighted atomic measures on the circle.
#[pyfunction]
fn h_neg1_distance(
    positions_a: Vec<f64>,
    weights_a: Vec<f64>,
    positions_b: Vec<f64>,
    weights_b: Vec<f64>,
) -> PyResult<f64> {
    let a = MeasureRep::Atomic(atomic(positions_a, weights_a)?);
    let b = MeasureRep::Atomic(atomic(positions_b, weights_b)?);
    h_neg1_dist(&a, &b).map_err(to_py_err)
}

/// Circular Wasserstein-1 distance between two weighted atomic measures.
#[pyfunction]
#[pyo3(name = "circular_w1")]
fn circular_w1_py(
    positions_a: Vec<f64>,
    weights_a: Vec<f64>,
    positions_b: Vec<f64>,
    weights_b: Vec<f64>,
) -> PyResult<f64> {
    let a = atomic(positions_a, weights_a)?;
    let b = atomic(positions_b, weights_b)?;
    circular_w1(&a, &b).map_err(to_py_err)
}

/// Exact cut norm of a small matrix (brute force over cut pairs).
#[pyfunction]
#[pyo3(name = "cut_norm_exact")]
fn cut_norm_exact_py(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(cut_norm_exact(&array_from_rows(rows)?).map_err(to_py_err)?.value)
}

/// Heuristic cut norm lower bound with random restarts.
#[pyfunction]
#[pyo3(name = "cut_norm_heuristic", signature = (rows, restarts = 16, seed = 0))]
fn cut_norm_heuristic_py(rows: Vec<Vec<f64>>, restarts: u32, seed: u64) -> PyResult<f64> {
    let w = array_from_rows(rows)?;
    Ok(cut_norm_heuristic(&w, restarts, seed).map_err(to_py_err)?.value)
}

/// Weak-regularity partition of a square matrix into at most `max_classes`
/// classes. Returns (class labels, residual cut norm of w - w_P).
#[pyfunction]
fn regularity_partition(rows: Vec<Vec<f64>>, max_classes: usize) -> PyResult<(Vec<usize>, f64)> {
    let w = array_from_rows(rows)?;
    let (partition, projected) = weak_regularity_partition(&w, max_classes).map_err(to_py_err)?;
    let residual = cut_norm_heuristic(&(&w - &projected), 16, 0).map_err(to_py_err)?;
    Ok((partition.class_of().to_vec(), residual.value))
}

/// Number of oriented trees with between 2 and `max_vertices` vertices.
#[pyfunction]
fn count_trees(max_vertices: usize) -> PyResult<usize> {
    Ok(enumerate_trees(max_vertices).map_err(to_py_err)?.len())
}

/// Labels of the enumerated oriented trees, e.g. "v3:0>1,0>2".
#[pyfunction]
fn tree_labels(max_vertices: usize) -> PyResult<Vec<String>> {
    Ok(enumerate_trees(max_vertices)
        .map_err(to_py_err)?
        .iter()
        .map(OrientedTree::label)
        .collect())
}

/// Homomorphism density t(T, w) of an oriented tree in a kernel matrix,
/// with per-edge signature bits selecting w (1) or its complement flip (0).
#[pyfunction]
#[pyo3(name = "homomorphism_density")]
fn homomorphism_density_py(
    rows: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    signature: Vec<u8>,
) -> PyResult<f64> {
    let w = array_from_rows(rows)?;
    let v = edges
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .max()
        .map_or(0, |m| m + 1);
    let tree = OrientedTree::new(v, edges).map_err(to_py_err)?;
    let sig = EdgeSignature::new(signature).map_err(to_py_err)?;
    homomorphism_density(&w, &tree, &sig).map_err(to_py_err)
}

/// Tree-observable metric between two finite systems (positions + weight
/// matrices), as a weighted supremum over trees up to `max_vertices`.
#[pyfunction]
#[pyo3(name = "observable_metric", signature = (x1, w1, x2, w2, max_vertices = 3, w_max = 1.0))]
fn observable_metric_py(
    x1: Vec<f64>,
    w1: Vec<Vec<f64>>,
    x2: Vec<f64>,
    w2: Vec<Vec<f64>>,
    max_vertices: usize,
    w_max: f64,
) -> PyResult<f64> {
    let a = System::Finite(finite_system(x1, w1)?);
    let b = System::Finite(finite_system(x2, w2)?);
    Ok(observable_metric(&a, &b, max_vertices, w_max).map_err(to_py_err)?.value)
}

/// Bi-coupling transport distance between two finite systems. Returns a dict
/// with the objective value, its transport and spectral parts, the iteration
/// count, the convergence flag, and the coupling matrix.
#[pyfunction]
#[pyo3(signature = (x1, w1, x2, w2, max_iter = 2000, tol = 1e-6, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn bicoupling_distance<'py>(
    py: Python<'py>,
    x1: Vec<f64>,
    w1: Vec<Vec<f64>>,
    x2: Vec<f64>,
    w2: Vec<Vec<f64>>,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = finite_system(x1, w1)?;
    let b = finite_system(x2, w2)?;
    let cfg = SolveConfig { max_iter, tol, seed, init: None };
    let r = solve_bicoupling(&a, &b, &cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("value", r.value)?;
    out.set_item("w1_term", r.w1_term)?;
    out.set_item("op_terms", r.op_terms)?;
    out.set_item("iterations", r.iterations)?;
    out.set_item("converged", r.converged)?;
    let gamma: Vec<Vec<f64>> = r.gamma.gamma().rows().into_iter().map(|r| r.to_vec()).collect();
    out.set_item("gamma", gamma)?;
    Ok(out)
}

/// Run the interacting-particle integrator and return the final positions.
#[pyfunction]
#[pyo3(signature = (
    x0, w, drift = "zero", drift_param = 0.0, interaction = "zero",
    interaction_param = 0.0, nu = 0.0, t_end = 1.0, steps = 100, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    x0: Vec<f64>,
    w: Vec<Vec<f64>>,
    drift: &str,
    drift_param: f64,
    interaction: &str,
    interaction_param: f64,
    nu: f64,
    t_end: f64,
    steps: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let system = finite_system(x0, w)?;
    let coeffs = Coefficients {
        mu: drift_from_args(drift, drift_param)?,
        sigma: interaction_from_args(interaction, interaction_param)?,
        nu,
    };
    let tg = TimeGrid::with_steps(t_end, steps).map_err(to_py_err)?;
    let end = simulate_particles(&system, &coeffs, &tg, seed).map_err(to_py_err)?;
    Ok(end.x().to_vec())
}

#[pymodule]
#[pyo3(name = "nexmf")]
fn nexmf_python(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(torus_dist_py, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_range, m)?)?;
    m.add_function(wrap_pyfunction!(h_neg1_distance, m)?)?;
    m.add_function(wrap_pyfunction!(circular_w1_py, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm_exact_py, m)?)?;
    m.add_function(wrap_pyfunction!(cut_norm_heuristic_py, m)?)?;
    m.add_function(wrap_pyfunction!(regularity_partition, m)?)?;
    m.add_function(wrap_pyfunction!(count_trees, m)?)?;
    m.add_function(wrap_pyfunction!(tree_labels, m)?)?;
    m.add_function(wrap_pyfunction!(homomorphism_density_py, m)?)?;
    m.add_function(wrap_pyfunction!(observable_metric_py, m)?)?;
    m.add_function(wrap_pyfunction!(bicoupling_distance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
