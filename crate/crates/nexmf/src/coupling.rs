//! Transport couplings between finite systems: the transportation polytope,
//! exact circular Wasserstein-1, the bi-coupling objective combining state
//! transport with spectral alignment of the weight matrices, a projected
//! subgradient solver for it, and a Fourier-truncated cut-norm diagnostic.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::cutnorm::op_norm_l2;
use crate::error::{Error, Result};
use crate::seeding::child_seed;
use crate::system::FiniteSystem;
use crate::torus::{torus_dist, wrap, AtomicMeasure};

/// Allowed deviation of coupling marginals from the uniform targets.
pub const MARGINAL_TOLERANCE: f64 = 1e-9;

/// A coupling of the uniform measures on {1..N₁} and {1..N₂}: a nonnegative
/// N₁×N₂ matrix with row sums 1/N₁ and column sums 1/N₂.
#[derive(Clone, Debug)]
pub struct Coupling {
    gamma: Array2<f64>,
}

impl Coupling {
    /// Validates marginals and nonnegativity. Entries in [-1e-15, 0) are
    /// treated as roundoff and clamped to zero; anything more negative is
    /// rejected.
    pub fn new(mut gamma: Array2<f64>) -> Result<Self> {
        let (n1, n2) = (gamma.nrows(), gamma.ncols());
        if n1 == 0 || n2 == 0 {
            return Err(Error::invalid("coupling must be nonempty"));
        }
        for v in gamma.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("coupling entry".into()));
            }
            if *v < 0.0 {
                if *v < -1e-15 {
                    return Err(Error::invalid(format!("negative coupling entry {v}")));
                }
                *v = 0.0;
            }
        }
        let c = Coupling { gamma };
        let residual = c.marginal_residual();
        if residual > MARGINAL_TOLERANCE {
            return Err(Error::invalid(format!(
                "coupling marginals deviate from uniform by {residual:.3e} (tolerance {MARGINAL_TOLERANCE:.0e})"
            )));
        }
        Ok(c)
    }

    /// The product coupling γᵢⱼ = 1/(N₁N₂).
    pub fn product(n1: usize, n2: usize) -> Coupling {
        Coupling {
            gamma: Array2::from_elem((n1, n2), 1.0 / (n1 as f64 * n2 as f64)),
        }
    }

    /// The diagonal coupling γᵢᵢ = 1/N of a system with itself.
    pub fn identity(n: usize) -> Coupling {
        Coupling {
            gamma: Array2::from_diag_elem(n, 1.0 / n as f64),
        }
    }

    /// The coupling pairing i with π(i), mass 1/N each.
    pub fn from_permutation(perm: &[usize]) -> Result<Coupling> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::invalid("not a permutation"));
            }
            seen[p] = true;
        }
        let mut gamma = Array2::zeros((n, n));
        for (i, &p) in perm.iter().enumerate() {
            gamma[[i, p]] = 1.0 / n as f64;
        }
        Ok(Coupling { gamma })
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn n1(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n2(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn transpose(&self) -> Coupling {
        Coupling {
            gamma: self.gamma.t().to_owned(),
        }
    }

    /// Largest absolute deviation of any row sum from 1/N₁ or column sum
    /// from 1/N₂.
    pub fn marginal_residual(&self) -> f64 {
        marginal_residual_of(&self.gamma)
    }

    /// Writes the matrix as plain CSV (one row per line) for inspection.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for row in self.gamma.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

impl Serialize for Coupling {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.gamma.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut st = serializer.serialize_struct("Coupling", 3)?;
        st.serialize_field("n1", &self.n1())?;
        st.serialize_field("n2", &self.n2())?;
        st.serialize_field("gamma", &rows)?;
        st.end()
    }
}

fn marginal_residual_of(gamma: &Array2<f64>) -> f64 {
    let (n1, n2) = (gamma.nrows(), gamma.ncols());
    let row_target = 1.0 / n1 as f64;
    let col_target = 1.0 / n2 as f64;
    let mut worst = 0.0f64;
    for row in gamma.rows() {
        worst = worst.max((row.sum() - row_target).abs());
    }
    for col in gamma.columns() {
        worst = worst.max((col.sum() - col_target).abs());
    }
    worst
}

/// The value of the bi-coupling objective at one coupling, split into its
/// transport and spectral parts.
#[derive(Clone, Debug, Serialize)]
pub struct BicouplingResult {
    pub gamma: Coupling,
    pub value: f64,
    pub w1_term: f64,
    pub op_terms: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub converged: bool,
}

/// Solver knobs for `solve_bicoupling`. `init` optionally replaces the
/// product-coupling start, e.g. with a transport plan from a coarser run.
#[derive(Clone, Debug)]
pub struct SolveConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: Option<Coupling>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iter: 2000,
            tol: 1e-6,
            seed: 0,
            init: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Circular Wasserstein-1
// ---------------------------------------------------------------------------

/// Piecewise-constant profile of F_a - F_b between consecutive atoms,
/// returned as (value, segment length) pairs covering total length 1.
fn cdf_difference_profile(a: &AtomicMeasure, b: &AtomicMeasure) -> Vec<(f64, f64)> {
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    for k in 0..a.len() {
        events.push((wrap(a.position(k)[0]), a.weights()[k]));
    }
    for k in 0..b.len() {
        events.push((wrap(b.position(k)[0]), -b.weights()[k]));
    }
    events.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    // Merge coincident positions so every segment has positive length.
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(events.len());
    for (pos, delta) in events {
        match merged.last_mut() {
            Some((p, d)) if *p == pos => *d += delta,
            _ => merged.push((pos, delta)),
        }
    }
    let mut profile = Vec::with_capacity(merged.len());
    let mut cum = 0.0;
    for k in 0..merged.len() {
        cum += merged[k].1;
        let next = if k + 1 < merged.len() {
            merged[k + 1].0
        } else {
            merged[0].0 + 1.0
        };
        profile.push((cum, next - merged[k].0));
    }
    profile
}

/// Weighted median of the profile values, weighting by segment length.
fn weighted_median(profile: &[(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = profile.to_vec();
    sorted.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let half = 0.5 * sorted.iter().map(|(_, l)| l).sum::<f64>();
    let mut cum = 0.0;
    for (v, l) in &sorted {
        cum += l;
        if cum >= half {
            return *v;
        }
    }
    sorted.last().map(|(v, _)| *v).unwrap_or(0.0)
}

fn require_probability(m: &AtomicMeasure, what: &str) -> Result<()> {
    if m.arity() != 1 {
        return Err(Error::invalid(format!(
            "{what} must have arity 1, got {}",
            m.arity()
        )));
    }
    if m.weights().iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(format!("{what} has a negative weight")));
    }
    if (m.total_mass() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "{what} has total mass {} instead of 1",
            m.total_mass()
        )));
    }
    Ok(())
}

/// Exact 1-Wasserstein distance between two atomic probability measures on
/// the circle: the L¹ distance between their CDFs, minimized over the
/// vertical offset (attained at a weighted median of the CDF difference).
pub fn circular_w1(a: &AtomicMeasure, b: &AtomicMeasure) -> Result<f64> {
    require_probability(a, "first measure")?;
    require_probability(b, "second measure")?;
    let profile = cdf_difference_profile(a, b);
    let theta = weighted_median(&profile);
    Ok(profile.iter().map(|(v, l)| l * (v - theta).abs()).sum())
}

/// Cut point c on the circle where the CDF difference attains its median,
/// so that unrolling at c makes the monotone (sorted) pairing optimal.
fn optimal_cut_point(a: &AtomicMeasure, b: &AtomicMeasure) -> f64 {
    let profile_start: Vec<f64> = {
        // Rebuild merged positions to locate segment boundaries.
        let mut pos: Vec<f64> = (0..a.len())
            .map(|k| wrap(a.position(k)[0]))
            .chain((0..b.len()).map(|k| wrap(b.position(k)[0])))
            .collect();
        pos.sort_by(|p, q| p.partial_cmp(q).unwrap());
        pos.dedup();
        pos
    };
    let profile = cdf_difference_profile(a, b);
    debug_assert_eq!(profile_start.len(), profile.len());
    let theta = weighted_median(&profile);
    let mut best = (f64::INFINITY, 0usize);
    for (k, (v, l)) in profile.iter().enumerate() {
        if *l > 0.0 {
            let gap = (v - theta).abs();
            if gap < best.0 {
                best = (gap, k);
            }
        }
    }
    let k = best.1;
    wrap(profile_start[k] + 0.5 * profile[k].1)
}

/// Orders indices by circular position relative to the cut point.
fn order_from_cut(positions: &[f64], cut: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&i, &j| {
        let a = wrap(positions[i] - cut);
        let b = wrap(positions[j] - cut);
        a.partial_cmp(&b).unwrap()
    });
    order
}

/// Northwest-corner pairing of uniform atoms in the given orders, done in
/// integer mass units of 1/(N₁N₂) so marginals come out exact.
fn northwest_corner(
    order1: &[usize],
    order2: &[usize],
    n1: usize,
    n2: usize,
    gamma: &mut Array2<f64>,
) {
    let unit = 1.0 / (n1 as f64 * n2 as f64);
    let mut remaining_row = n2 as u64;
    let mut remaining_col = n1 as u64;
    let (mut a, mut b) = (0usize, 0usize);
    while a < order1.len() && b < order2.len() {
        let move_units = remaining_row.min(remaining_col);
        gamma[[order1[a], order2[b]]] += move_units as f64 * unit;
        remaining_row -= move_units;
        remaining_col -= move_units;
        if remaining_row == 0 {
            a += 1;
            remaining_row = n2 as u64;
        }
        if remaining_col == 0 {
            b += 1;
            remaining_col = n1 as u64;
        }
    }
}

/// The cyclically monotone transport plan between two uniform atomic
/// configurations, cut at the optimal offset. Its transport cost equals the
/// exact circular Wasserstein-1 distance of the empirical measures.
pub fn monotone_transport_coupling(x1: &[f64], x2: &[f64]) -> Result<Coupling> {
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::invalid("empty state vector"));
    }
    let a = AtomicMeasure::empirical(x1)?;
    let b = AtomicMeasure::empirical(x2)?;
    let cut = optimal_cut_point(&a, &b);
    let order1 = order_from_cut(x1, cut);
    let order2 = order_from_cut(x2, cut);
    let mut gamma = Array2::zeros((x1.len(), x2.len()));
    northwest_corner(&order1, &order2, x1.len(), x2.len(), &mut gamma);
    Coupling::new(gamma)
}

/// A block-diagonal coupling that pairs equal-share classes monotonically.
/// Requires the class shares to match: n1_c/N₁ = n2_c/N₂ for every class.
pub fn class_monotone_coupling(
    x1: &[f64],
    labels1: &[usize],
    x2: &[f64],
    labels2: &[usize],
) -> Result<Coupling> {
    if x1.len() != labels1.len() || x2.len() != labels2.len() {
        return Err(Error::dim("labels must match states"));
    }
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::invalid("empty state vector"));
    }
    let k = labels1
        .iter()
        .chain(labels2.iter())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let (n1, n2) = (x1.len(), x2.len());
    let mut gamma = Array2::zeros((n1, n2));
    for c in 0..k {
        let idx1: Vec<usize> = (0..n1).filter(|&i| labels1[i] == c).collect();
        let idx2: Vec<usize> = (0..n2).filter(|&j| labels2[j] == c).collect();
        if idx1.is_empty() && idx2.is_empty() {
            continue;
        }
        if idx1.len() * n2 != idx2.len() * n1 {
            return Err(Error::invalid(format!(
                "class {c} holds {}/{} atoms on one side and {}/{} on the other; shares must agree",
                idx1.len(),
                n1,
                idx2.len(),
                n2
            )));
        }
        let pos1: Vec<f64> = idx1.iter().map(|&i| x1[i]).collect();
        let pos2: Vec<f64> = idx2.iter().map(|&j| x2[j]).collect();
        let a = AtomicMeasure::empirical(&pos1)?;
        let b = AtomicMeasure::empirical(&pos2)?;
        let cut = optimal_cut_point(&a, &b);
        let order1: Vec<usize> = order_from_cut(&pos1, cut)
            .into_iter()
            .map(|i| idx1[i])
            .collect();
        let order2: Vec<usize> = order_from_cut(&pos2, cut)
            .into_iter()
            .map(|j| idx2[j])
            .collect();
        // Within the block, atoms still carry global masses 1/N₁ and 1/N₂,
        // which the share condition makes consistent.
        let mut block = Array2::zeros((n1, n2));
        northwest_corner(&order1, &order2, n1, n2, &mut block);
        gamma += &block;
    }
    Coupling::new(gamma)
}

// ---------------------------------------------------------------------------
// Euclidean projection onto the transportation polytope
// ---------------------------------------------------------------------------

/// Euclidean projection of a vector onto the scaled simplex
/// {x ≥ 0, Σx = total}, by the sorting algorithm.
fn project_to_simplex(y: &mut [f64], total: f64) {
    let mut sorted: Vec<f64> = y.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = (cum - total) / 1.0;
    let mut rho = 0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - total) / (k + 1) as f64;
        if v - t > 0.0 {
            tau = t;
            rho = k + 1;
        }
    }
    let _ = rho;
    for v in y.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
}

/// Euclidean projection onto the coupling polytope by Dykstra's alternating
/// projections between the row-simplex and column-simplex constraint sets.
/// Iterates until the iterate stabilizes; well-conditioned inputs settle
/// with marginal residuals near roundoff, while near-vertex inputs may stop
/// anywhere inside [`MARGINAL_TOLERANCE`]. An error is raised only when even
/// that cannot be reached.
pub fn project_to_coupling(y: &Array2<f64>) -> Result<Coupling> {
    let (n1, n2) = (y.nrows(), y.ncols());
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("cannot project an empty matrix"));
    }
    for &v in y.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite("projection input".into()));
        }
    }
    let row_target = 1.0 / n1 as f64;
    let col_target = 1.0 / n2 as f64;
    let mut x = y.clone();
    let mut p = Array2::<f64>::zeros((n1, n2));
    let mut q = Array2::<f64>::zeros((n1, n2));
    let mut window_step = f64::INFINITY;
    for it in 0..20_000usize {
        let previous = x.clone();
        let mut yr = &x + &p;
        for mut row in yr.rows_mut() {
            project_to_simplex(row.as_slice_mut().unwrap(), row_target);
        }
        p = &x + &p - &yr;
        let mut yc = &yr + &q;
        for mut col in yc.columns_mut() {
            let mut buf: Vec<f64> = col.to_vec();
            project_to_simplex(&mut buf, col_target);
            for (dst, src) in col.iter_mut().zip(buf) {
                *dst = src;
            }
        }
        q = &yr + &q - &yc;
        x = yc;
        // A feasible iterate is not yet the projection: the correction
        // terms can keep reshaping the active set while the marginals
        // already hold. Require the iterate itself to stabilize.
        let step = x
            .iter()
            .zip(previous.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if step <= 1e-13 && marginal_residual_of(&x) <= MARGINAL_TOLERANCE {
            return Coupling::new(x);
        }
        // Near a vertex of the polytope the finishing rate collapses; once
        // per-round movement stops shrinking and the iterate is already a
        // valid coupling, further rounds polish nothing a caller can sense.
        if it % 250 == 249 {
            if step > 0.5 * window_step && marginal_residual_of(&x) <= MARGINAL_TOLERANCE {
                return Coupling::new(x);
            }
            window_step = step;
        }
    }
    let residual = marginal_residual_of(&x);
    if residual <= MARGINAL_TOLERANCE {
        return Coupling::new(x);
    }
    Err(Error::Numerics(format!(
        "alternating projections stalled at marginal residual {residual:.3e}"
    )))
}

// ---------------------------------------------------------------------------
// Bi-coupling objective
// ---------------------------------------------------------------------------

/// Matrix of torus distances d(x1_i, x2_j).
fn distance_matrix(x1: &[f64], x2: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((x1.len(), x2.len()), |(i, j)| torus_dist(x1[i], x2[j]))
}

/// The two spectral alignment matrices N₂w¹γ − N₁γw² and its transpose-side
/// companion N₂γᵀw¹ − N₁w²γᵀ.
fn alignment_matrices(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    gamma: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n1, n2) = (s1.n() as f64, s2.n() as f64);
    let a = s1.w().dot(gamma) * n2 - gamma.dot(s2.w()) * n1;
    let b = gamma.t().dot(s1.w()) * n2 - s2.w().dot(&gamma.t().to_owned()) * n1;
    (a, b)
}

fn objective_parts(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    d: &Array2<f64>,
    gamma: &Array2<f64>,
) -> Result<(f64, f64)> {
    let w1_term = (d * gamma).sum();
    let (a, b) = alignment_matrices(s1, s2, gamma);
    let scale = 1.0 / ((s1.n() as f64) * (s2.n() as f64)).sqrt();
    let op_terms = scale * (op_norm_l2(&a)? + op_norm_l2(&b)?);
    Ok((w1_term, op_terms))
}

/// Evaluates the bi-coupling objective at a given coupling: transport cost
/// of the states plus the scaled spectral norms of both alignment residuals.
pub fn bicoupling_objective(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    g: &Coupling,
) -> Result<BicouplingResult> {
    if g.n1() != s1.n() || g.n2() != s2.n() {
        return Err(Error::dim(format!(
            "coupling is {}x{} but systems have sizes {} and {}",
            g.n1(),
            g.n2(),
            s1.n(),
            s2.n()
        )));
    }
    let d = distance_matrix(s1.x(), s2.x());
    let (w1_term, op_terms) = objective_parts(s1, s2, &d, g.gamma())?;
    Ok(BicouplingResult {
        value: w1_term + op_terms,
        w1_term,
        op_terms,
        iterations: 0,
        marginal_residual: g.marginal_residual(),
        converged: true,
        gamma: g.clone(),
    })
}

/// Top singular triple (σ, u, v) by power iteration on the Gram operator;
/// approximate pairs are fine for subgradient purposes.
fn top_singular_triple(m: &Array2<f64>, rng: &mut ChaCha8Rng) -> (f64, Array1<f64>, Array1<f64>) {
    let (rows, cols) = (m.nrows(), m.ncols());
    let mut v = Array1::from_shape_fn(cols, |_| rng.random::<f64>() - 0.5);
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return (0.0, Array1::zeros(rows), Array1::zeros(cols));
    }
    v.mapv_inplace(|x| x / norm);
    let mut sigma = 0.0;
    for _ in 0..500 {
        let image = m.t().dot(&m.dot(&v));
        let norm = image.dot(&image).sqrt();
        if norm == 0.0 {
            return (0.0, Array1::zeros(rows), Array1::zeros(cols));
        }
        let new_sigma = v.dot(&image).max(0.0).sqrt();
        v = image / norm;
        if (new_sigma - sigma).abs() <= 1e-9 * new_sigma.max(1.0) {
            sigma = new_sigma;
            break;
        }
        sigma = new_sigma;
    }
    let mv = m.dot(&v);
    let mv_norm = mv.dot(&mv).sqrt();
    if mv_norm == 0.0 {
        return (0.0, Array1::zeros(rows), v);
    }
    (sigma, mv / mv_norm, v)
}

/// Subgradient of the full objective at gamma: the distance matrix plus the
/// adjoints of both alignment maps applied to their top singular dyads.
fn objective_subgradient(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    d: &Array2<f64>,
    gamma: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let (n1, n2) = (s1.n() as f64, s2.n() as f64);
    let scale = 1.0 / (n1 * n2).sqrt();
    let (a, b) = alignment_matrices(s1, s2, gamma);
    let mut grad = d.clone();
    let (sig_a, u, v) = top_singular_triple(&a, rng);
    if sig_a > 0.0 {
        // d σ(A)/dγ for A = N₂w¹γ − N₁γw²:  N₂ w¹ᵀu vᵀ − N₁ u (w²v)ᵀ.
        let wtu = s1.w().t().dot(&u);
        let wv = s2.w().dot(&v);
        for i in 0..s1.n() {
            for j in 0..s2.n() {
                grad[[i, j]] += scale * (n2 * wtu[i] * v[j] - n1 * u[i] * wv[j]);
            }
        }
    }
    let (sig_b, p, q) = top_singular_triple(&b, rng);
    if sig_b > 0.0 {
        // d σ(B)/dγ for B = N₂γᵀw¹ − N₁w²γᵀ:  N₂ (w¹q) pᵀ − N₁ q (w²ᵀp)ᵀ,
        // with p on the N₂ side and q on the N₁ side.
        let wq = s1.w().dot(&q);
        let wtp = s2.w().t().dot(&p);
        for i in 0..s1.n() {
            for j in 0..s2.n() {
                grad[[i, j]] += scale * (n2 * wq[i] * p[j] - n1 * q[i] * wtp[j]);
            }
        }
    }
    grad
}

/// Minimizes the bi-coupling objective by projected subgradient descent
/// with the diminishing step c/√t, c set from the first iterate, projecting
/// back onto the polytope after every step.
///
/// The best iterate is tracked throughout, and the cyclically monotone
/// transport plan is always evaluated as an extra candidate, so the
/// returned value is a certified upper bound on the true distance. The
/// `converged` flag reports whether the relative improvement fell below
/// `cfg.tol` before the iteration budget ran out.
pub fn solve_bicoupling(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    cfg: &SolveConfig,
) -> Result<BicouplingResult> {
    let (result, _trace) = solve_bicoupling_traced(s1, s2, cfg)?;
    Ok(result)
}

/// Same as `solve_bicoupling`, additionally returning the best objective
/// value seen after each descent iteration (trace[0] is the starting
/// point). The trace covers the descent sequence only, so two runs from
/// different starts can be compared iteration by iteration; the monotone
/// transport candidate is folded into the returned result but not into the
/// trace.
pub fn solve_bicoupling_traced(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    cfg: &SolveConfig,
) -> Result<(BicouplingResult, Vec<f64>)> {
    if cfg.max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    let d = distance_matrix(s1.x(), s2.x());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut gamma = match &cfg.init {
        Some(g) => {
            if g.n1() != s1.n() || g.n2() != s2.n() {
                return Err(Error::dim("init coupling has the wrong shape"));
            }
            g.gamma().clone()
        }
        None => Coupling::product(s1.n(), s2.n()).gamma().clone(),
    };

    let (w1_0, op_0) = objective_parts(s1, s2, &d, &gamma)?;
    let mut best_value = w1_0 + op_0;
    let mut best_parts = (w1_0, op_0);
    let mut best_gamma = gamma.clone();
    let mut trace = Vec::with_capacity(cfg.max_iter + 1);
    trace.push(best_value);

    let mut step_scale: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut window_best = best_value;
    for t in 1..=cfg.max_iter {
        iterations = t;
        let grad = objective_subgradient(s1, s2, &d, &gamma, &mut rng);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            converged = true;
            trace.push(best_value);
            break;
        }
        let c = *step_scale.get_or_insert(best_value.max(1e-12) / gnorm);
        let step = c / (t as f64).sqrt();
        let moved = &gamma - &(&grad * (step / gnorm));
        gamma = project_to_coupling(&moved)?.gamma().clone();
        let (w1_t, op_t) = objective_parts(s1, s2, &d, &gamma)?;
        let value = w1_t + op_t;
        if value < best_value {
            best_value = value;
            best_parts = (w1_t, op_t);
            best_gamma = gamma.clone();
        }
        trace.push(best_value);
        if t % 50 == 0 {
            let improvement = (window_best - best_value) / window_best.max(1e-15);
            if improvement < cfg.tol {
                converged = true;
                break;
            }
            window_best = best_value;
        }
    }

    // The monotone circular transport plan is optimal for the transport
    // term alone and often near-optimal overall; fold it in as a candidate.
    if let Ok(candidate) = monotone_transport_coupling(s1.x(), s2.x()) {
        let (w1_c, op_c) = objective_parts(s1, s2, &d, candidate.gamma())?;
        if w1_c + op_c < best_value {
            best_value = w1_c + op_c;
            best_parts = (w1_c, op_c);
            best_gamma = candidate.gamma().clone();
        }
    }

    let gamma = Coupling::new(best_gamma)?;
    let result = BicouplingResult {
        value: best_value,
        w1_term: best_parts.0,
        op_terms: best_parts.1,
        iterations,
        marginal_residual: gamma.marginal_residual(),
        converged,
        gamma,
    };
    Ok((result, trace))
}

/// Composition of couplings through the middle space: N₂·γ₁₂γ₂₃, which
/// restores the uniform marginals exactly.
pub fn compose_couplings(g12: &Coupling, g23: &Coupling) -> Result<Coupling> {
    if g12.n2() != g23.n1() {
        return Err(Error::dim(format!(
            "inner dimensions disagree: {} vs {}",
            g12.n2(),
            g23.n1()
        )));
    }
    let product = g12.gamma().dot(g23.gamma()) * (g12.n2() as f64);
    Coupling::new(product)
}

// ---------------------------------------------------------------------------
// Fourier-truncated Hilbert cut estimate
// ---------------------------------------------------------------------------

/// A truncated element of H⁻¹ ⊕ H⁻¹: complex Fourier coefficients for
/// modes 0..=cap in each slot (negative modes implied by conjugation).
#[derive(Clone)]
struct HilbertVector {
    slots: [Vec<Complex64>; 2],
}

impl HilbertVector {
    fn zeros(cap: usize) -> Self {
        HilbertVector {
            slots: [vec![Complex64::ZERO; cap + 1], vec![Complex64::ZERO; cap + 1]],
        }
    }

    fn norm(&self, weights: &[f64]) -> f64 {
        let mut sq = 0.0;
        for slot in &self.slots {
            for (c, w) in slot.iter().zip(weights) {
                sq += w * c.norm_sqr();
            }
        }
        sq.sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for slot in &mut self.slots {
            for c in slot.iter_mut() {
                *c *= factor;
            }
        }
    }
}

/// Combined multiplier per mode: (1+4π²m²)⁻¹, doubled for m ≥ 1 to account
/// for the conjugate mode.
fn mode_weights(cap: usize) -> Vec<f64> {
    (0..=cap)
        .map(|m| {
            let mu = crate::torus::sobolev_multiplier(m as i64, 1.0);
            if m == 0 {
                mu
            } else {
                2.0 * mu
            }
        })
        .collect()
}

/// e^{-2πi m x} for m = 0..=cap, one row per point.
fn mode_table(points: &[f64], cap: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((points.len(), cap + 1), |(k, m)| {
        let phase = -2.0 * std::f64::consts::PI * m as f64 * points[k];
        Complex64::new(phase.cos(), phase.sin())
    })
}

/// One side of the Hilbert cut estimate: the cut norm (in the ℋ-valued
/// sense, restricted to the truncated Fourier ball) of
/// N_b·𝐰_a γ − N_a·γ 𝐰_b, where 𝐰 is the measure-valued kernel of each
/// system. Alternates between the optimal test vector for fixed subsets
/// and an alternating subset improvement for the fixed test vector.
fn hilbert_cut_term(
    sa: &FiniteSystem,
    sb: &FiniteSystem,
    gamma: &Array2<f64>,
    cap: usize,
    restarts: u32,
    seed: u64,
) -> f64 {
    let (na, nb) = (sa.n(), sb.n());
    let (naf, nbf) = (na as f64, nb as f64);
    let weights = mode_weights(cap);
    let za = mode_table(sa.x(), cap);
    let zb = mode_table(sb.x(), cap);
    let gwb = gamma.dot(sb.w());

    // slot1 coefficients depend on the column only:
    //   slot1_j(m) = N_b (γᵀ z_a(m))_j − z_b_j(m)
    let slot1 = {
        let mut s = Array2::<Complex64>::zeros((nb, cap + 1));
        for m in 0..=cap {
            for j in 0..nb {
                let mut acc = Complex64::ZERO;
                for k in 0..na {
                    acc += gamma[[k, j]] * za[[k, m]];
                }
                s[[j, m]] = nbf * acc - zb[[j, m]];
            }
        }
        s
    };
    // Per mode m, the matrix F_m = w_a · diag(z_a(m)) · γ carries the
    // weighted half of slot 2: slot2_ij(m) = N_b F_m[i,j] − N_a (γw_b)_ij z_b_j(m).
    let f_tables: Vec<Array2<Complex64>> = (0..=cap)
        .map(|m| {
            let scaled = Array2::from_shape_fn((na, nb), |(k, j)| za[[k, m]] * gamma[[k, j]]);
            let mut f = Array2::<Complex64>::zeros((na, nb));
            for i in 0..na {
                for k in 0..na {
                    let w = sa.w()[[i, k]];
                    if w != 0.0 {
                        for j in 0..nb {
                            f[[i, j]] += w * scaled[[k, j]];
                        }
                    }
                }
            }
            f
        })
        .collect();

    let aggregate = |rows: &[bool], cols: &[bool]| -> HilbertVector {
        let mut e = HilbertVector::zeros(cap);
        let nsel = rows.iter().filter(|&&r| r).count() as f64;
        let norm = 1.0 / (naf * nbf);
        for m in 0..=cap {
            let mut s1 = Complex64::ZERO;
            let mut s2 = Complex64::ZERO;
            for j in 0..nb {
                if cols[j] {
                    s1 += slot1[[j, m]];
                    let mut col_w = Complex64::ZERO;
                    for i in 0..na {
                        if rows[i] {
                            col_w += f_tables[m][[i, j]];
                        }
                    }
                    let mut gw_sel = 0.0;
                    for i in 0..na {
                        if rows[i] {
                            gw_sel += gwb[[i, j]];
                        }
                    }
                    s2 += nbf * col_w - naf * gw_sel * zb[[j, m]];
                }
            }
            e.slots[0][m] = norm * nsel * s1;
            e.slots[1][m] = norm * s2;
        }
        e
    };

    let score = |e: &HilbertVector| -> Array2<f64> {
        // ⟨A_ij, e⟩ = ⟨slot1_j, e¹⟩ + ⟨slot2_ij, e²⟩ with the mode weights.
        let ip1: Vec<f64> = (0..nb)
            .map(|j| {
                (0..=cap)
                    .map(|m| weights[m] * (slot1[[j, m]] * e.slots[0][m].conj()).re)
                    .sum()
            })
            .collect();
        let psi: Vec<f64> = (0..nb)
            .map(|j| {
                (0..=cap)
                    .map(|m| weights[m] * (zb[[j, m]] * e.slots[1][m].conj()).re)
                    .sum()
            })
            .collect();
        let mut s = Array2::<f64>::zeros((na, nb));
        for m in 0..=cap {
            let coef = weights[m] * e.slots[1][m].conj();
            for i in 0..na {
                for j in 0..nb {
                    s[[i, j]] += nbf * (f_tables[m][[i, j]] * coef).re;
                }
            }
        }
        for i in 0..na {
            for j in 0..nb {
                s[[i, j]] += ip1[j] - naf * gwb[[i, j]] * psi[j];
            }
        }
        s
    };

    let run_restart = |r: u32| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, r as u64));
        let mut e = HilbertVector::zeros(cap);
        for slot in &mut e.slots {
            for (m, c) in slot.iter_mut().enumerate() {
                let re = rng.random::<f64>() - 0.5;
                let im = if m == 0 { 0.0 } else { rng.random::<f64>() - 0.5 };
                *c = Complex64::new(re, im);
            }
        }
        let norm = e.norm(&weights);
        if norm == 0.0 {
            return 0.0;
        }
        e.scale(1.0 / norm);
        let mut rows: Vec<bool> = (0..na).map(|_| rng.random::<bool>()).collect();
        let mut cols: Vec<bool> = (0..nb).map(|_| rng.random::<bool>()).collect();
        let mut value = 0.0f64;
        for _ in 0..100 {
            let s = score(&e);
            // Alternating subset improvement on the scalar matrix.
            for _ in 0..60 {
                let mut changed = false;
                for i in 0..na {
                    let r: f64 = (0..nb).filter(|&j| cols[j]).map(|j| s[[i, j]]).sum();
                    let want = if r > 0.0 {
                        true
                    } else if r < 0.0 {
                        false
                    } else {
                        rows[i]
                    };
                    if want != rows[i] {
                        rows[i] = want;
                        changed = true;
                    }
                }
                for j in 0..nb {
                    let c: f64 = (0..na).filter(|&i| rows[i]).map(|i| s[[i, j]]).sum();
                    let want = if c > 0.0 {
                        true
                    } else if c < 0.0 {
                        false
                    } else {
                        cols[j]
                    };
                    if want != cols[j] {
                        cols[j] = want;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            let agg = aggregate(&rows, &cols);
            let new_value = agg.norm(&weights);
            if new_value <= value + 1e-13 {
                value = value.max(new_value);
                break;
            }
            value = new_value;
            e = agg;
            e.scale(1.0 / new_value.max(1e-300));
        }
        value
    };

    (0..restarts)
        .into_par_iter()
        .map(run_restart)
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// Heuristic lower bound on the measure-valued cut distance between the
/// coupled kernels, probing test vectors in a truncated Fourier ball of
/// H⁻¹ ⊕ H⁻¹. Both alignment directions are estimated and summed. A
/// diagnostic, not a metric: values only ever under-estimate.
pub fn hilbert_coupling_estimate(
    s1: &FiniteSystem,
    s2: &FiniteSystem,
    g: &Coupling,
    fourier_cap: usize,
    restarts: u32,
) -> Result<f64> {
    if g.n1() != s1.n() || g.n2() != s2.n() {
        return Err(Error::dim("coupling shape does not match the systems"));
    }
    if fourier_cap == 0 {
        return Err(Error::invalid("fourier_cap must be at least 1"));
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    // Deterministic internal seeding so repeated calls agree.
    const BASE_SEED: u64 = 0x68c5_a1f0_37d2_4b19;
    let forward = hilbert_cut_term(s1, s2, g.gamma(), fourier_cap, restarts, BASE_SEED);
    let transposed = hilbert_cut_term(
        s2,
        s1,
        &g.gamma().t().to_owned(),
        fourier_cap,
        restarts,
        BASE_SEED ^ 0x9e37_79b9,
    );
    Ok(forward + transposed)
}
