//! Finite multi-agent systems, continuum (step-kernel) systems, and the
//! bridges between them: random vertex sampling, deterministic quantile
//! lifts, and the step-kernel extension of a finite system.
//!
//! Constructors enforce structural soundness (shapes, finiteness) and
//! nothing more; semantic invariants (ranges, masses) are checked by
//! [`validate`], which reports violations instead of failing, so that
//! deliberately broken inputs can be loaded and diagnosed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{ensure_finite, Error, Result};
use crate::torus::{wrap, AtomicMeasure, GridDensity};

/// A finite system of `n` agents: pairwise connection weights `w` (the
/// interaction prefactor, before the extra `1/n` of the mean-field sum) and
/// agent positions `x` on the circle.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSystem {
    w: Array2<f64>,
    x: Vec<f64>,
}

impl FiniteSystem {
    pub fn new(w: Array2<f64>, x: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("finite system needs at least one agent"));
        }
        if w.nrows() != w.ncols() {
            return Err(Error::dim(format!(
                "weight matrix must be square, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.nrows() != x.len() {
            return Err(Error::dim(format!(
                "weight matrix is {}x{} but there are {} positions",
                w.nrows(),
                w.ncols(),
                x.len()
            )));
        }
        for (idx, v) in w.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "w[{},{}] = {v}",
                    idx / x.len(),
                    idx % x.len()
                )));
            }
        }
        ensure_finite(&x, "x")?;
        Ok(FiniteSystem { w, x })
    }

    pub fn from_rows(rows: &[Vec<f64>], x: Vec<f64>) -> Result<Self> {
        let n = rows.len();
        let mut w = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::dim(format!(
                    "weight row {i} has length {}, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                w[[i, j]] = v;
            }
        }
        FiniteSystem::new(w, x)
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Largest absolute connection weight.
    pub fn w_max(&self) -> f64 {
        self.w.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The empirical measure of the agent positions (weight `1/n` each).
    pub fn empirical_measure(&self) -> AtomicMeasure {
        AtomicMeasure::empirical(&self.x).expect("positions are finite and nonempty")
    }

    pub fn hilbert_kernel(&self) -> HilbertKernelView<'_> {
        HilbertKernelView { system: self }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (i, &xi) in self.x.iter().enumerate() {
            if !(0.0..1.0).contains(&xi) {
                report.flag(format!("x[{i}] = {xi} outside [0,1)"));
            }
        }
        report
    }
}

/// A continuum system of `k` agent classes: class masses `kappa`, a `k`x`k`
/// interaction matrix, and one probability density per class, all sampled
/// on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuumSystem {
    kappa: Vec<f64>,
    w: Array2<f64>,
    densities: Vec<GridDensity>,
}

impl ContinuumSystem {
    pub fn new(kappa: Vec<f64>, w: Array2<f64>, densities: Vec<GridDensity>) -> Result<Self> {
        let k = kappa.len();
        if k == 0 {
            return Err(Error::invalid("continuum system needs at least one class"));
        }
        ensure_finite(&kappa, "kappa")?;
        if w.nrows() != k || w.ncols() != k {
            return Err(Error::dim(format!(
                "W must be {k}x{k}, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        for v in w.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("W entry = {v}")));
            }
        }
        if densities.len() != k {
            return Err(Error::dim(format!(
                "expected {k} class densities, got {}",
                densities.len()
            )));
        }
        let g = densities[0].grid_size();
        if densities.iter().any(|d| d.grid_size() != g) {
            return Err(Error::dim(
                "class densities must share one grid size",
            ));
        }
        Ok(ContinuumSystem {
            kappa,
            w,
            densities,
        })
    }

    pub fn k(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn densities(&self) -> &[GridDensity] {
        &self.densities
    }

    pub fn grid_size(&self) -> usize {
        self.densities[0].grid_size()
    }

    pub fn w_max(&self) -> f64 {
        self.w.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (c, &m) in self.kappa.iter().enumerate() {
            if m <= 0.0 {
                report.flag(format!("kappa[{c}] = {m} is not positive"));
            }
        }
        let total: f64 = self.kappa.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            report.flag(format!("kappa sums to {total}, expected 1"));
        }
        for (c, d) in self.densities.iter().enumerate() {
            for (j, &v) in d.values().iter().enumerate() {
                if v < 0.0 {
                    report.flag(format!("densities[{c}][{j}] = {v} is negative"));
                }
            }
            let mass = d.mass();
            // Quadrature and time integration drift the mass at roundoff
            // scale, so the unit-mass check is looser than the kappa check.
            if (mass - 1.0).abs() > 1e-8 {
                report.flag(format!("densities[{c}] has mass {mass}, expected 1"));
            }
        }
        report
    }
}

/// A finite system viewed as the Hilbert-space-valued kernel
/// `(ξ,ζ) ↦ (δ_{X(ζ)}, w(ξ,ζ) δ_{X(ζ)})` on index pairs.
pub struct HilbertKernelView<'a> {
    system: &'a FiniteSystem,
}

impl HilbertKernelView<'_> {
    /// The pair of weighted atoms at indices `(i, j)`: the first component
    /// depends on `j` alone, the second scales it by `w[i,j]`.
    pub fn pair(&self, i: usize, j: usize) -> Result<(AtomicMeasure, AtomicMeasure)> {
        let n = self.system.n();
        if i >= n || j >= n {
            return Err(Error::invalid(format!(
                "kernel index ({i},{j}) out of range for n = {n}"
            )));
        }
        let base = AtomicMeasure::dirac(&[self.system.x[j]])?;
        let weighted = base.scaled(self.system.w[[i, j]]);
        Ok((base, weighted))
    }
}

/// Outcome of an invariant check: a list of human-readable violations, each
/// naming the offending index.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    fn flag(&mut self, message: String) {
        self.violations.push(message);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.violations.join("\n"))
        }
    }
}

/// Piecewise-linear inverse CDF of a grid density: exact for step
/// densities, O(log G) per query.
struct DensityCdf {
    cumulative: Vec<f64>,
    grid_size: usize,
}

impl DensityCdf {
    fn new(density: &GridDensity) -> Result<Self> {
        let values = density.values();
        if let Some((j, &v)) = values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::invalid(format!(
                "cannot sample from a density with negative cell {j} = {v}"
            )));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(
                "cannot sample from a degenerate (zero-mass) density",
            ));
        }
        let mut cumulative = Vec::with_capacity(values.len() + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for &v in values {
            acc += v / total;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(DensityCdf {
            cumulative,
            grid_size: values.len(),
        })
    }

    fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0 - 1e-16);
        // First cell whose right CDF edge lies strictly above u; zero-mass
        // cells are skipped automatically.
        let j = self.cumulative[1..].partition_point(|&c| c <= u);
        let lo = self.cumulative[j];
        let hi = self.cumulative[j + 1];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        (j as f64 + frac) / self.grid_size as f64
    }
}

/// Draws a finite system of `n` agents from a continuum one: class labels
/// i.i.d. from `kappa`, positions by inverse-CDF from the class density,
/// weights read off the class matrix. Deterministic given the seed.
pub fn sample_finite(cont: &ContinuumSystem, n: usize, seed: u64) -> Result<FiniteSystem> {
    Ok(sample_finite_labeled(cont, n, seed)?.0)
}

/// Like [`sample_finite`], also returning the sampled class labels.
pub fn sample_finite_labeled(
    cont: &ContinuumSystem,
    n: usize,
    seed: u64,
) -> Result<(FiniteSystem, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an empty system"));
    }
    let cdfs: Vec<DensityCdf> = cont
        .densities()
        .iter()
        .map(DensityCdf::new)
        .collect::<Result<_>>()?;
    let total_kappa: f64 = cont.kappa().iter().sum();
    if total_kappa <= 0.0 {
        return Err(Error::invalid("class masses must have positive total"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = cont.k() - 1;
        for (c, &m) in cont.kappa().iter().enumerate() {
            acc += m / total_kappa;
            if u < acc {
                label = c;
                break;
            }
        }
        let v: f64 = rng.random();
        labels.push(label);
        x.push(cdfs[label].quantile(v));
    }

    let system = FiniteSystem::new(class_weight_matrix(cont.w(), &labels), x)?;
    Ok((system, labels))
}

fn class_weight_matrix(class_w: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| class_w[[labels[i], labels[j]]])
}

/// Splits `total` items across classes proportionally to `shares` using
/// largest-remainder rounding: totals are exact and the assignment is
/// deterministic (ties broken toward lower index).
pub fn largest_remainder_apportion(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().map(|s| s.max(0.0)).sum();
    if sum <= 0.0 || shares.is_empty() {
        let mut counts = vec![0; shares.len()];
        if let Some(first) = counts.first_mut() {
            *first = total;
        }
        return counts;
    }
    let quotas: Vec<f64> = shares
        .iter()
        .map(|s| s.max(0.0) / sum * total as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for idx in 0..total.saturating_sub(assigned) {
        counts[order[idx % order.len()]] += 1;
    }
    counts
}

/// Deterministic quadrature analogue of sampling: class `c` receives its
/// apportioned share of `k * m_per_class` agents, placed at the quantile
/// midpoints `(j - 1/2) / n_c` of the class density.
pub fn discretize_lift(cont: &ContinuumSystem, m_per_class: usize) -> Result<FiniteSystem> {
    Ok(discretize_lift_labeled(cont, m_per_class)?.0)
}

/// Like [`discretize_lift`], also returning each agent's class label.
pub fn discretize_lift_labeled(
    cont: &ContinuumSystem,
    m_per_class: usize,
) -> Result<(FiniteSystem, Vec<usize>)> {
    if m_per_class == 0 {
        return Err(Error::invalid("m_per_class must be at least 1"));
    }
    let total = cont.k() * m_per_class;
    let counts = largest_remainder_apportion(cont.kappa(), total);
    let mut labels = Vec::with_capacity(total);
    let mut x = Vec::with_capacity(total);
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let cdf = DensityCdf::new(&cont.densities()[c])?;
        for j in 1..=count {
            labels.push(c);
            x.push(cdf.quantile((j as f64 - 0.5) / count as f64));
        }
    }
    let system = FiniteSystem::new(class_weight_matrix(cont.w(), &labels), x)?;
    Ok((system, labels))
}

/// The step-kernel extension of a finite system: `n` classes of mass `1/n`,
/// the weight matrix reused as the class matrix, and each class density a
/// single-cell bump at the agent's position on a grid of `grid_size` cells.
pub fn step_extension(sys: &FiniteSystem, grid_size: usize) -> Result<ContinuumSystem> {
    if grid_size == 0 {
        return Err(Error::invalid("grid_size must be positive"));
    }
    let n = sys.n();
    let kappa = vec![1.0 / n as f64; n];
    let mut densities = Vec::with_capacity(n);
    for &xi in sys.x() {
        let mut values = vec![0.0; grid_size];
        let mut cell = (wrap(xi) * grid_size as f64) as usize;
        if cell >= grid_size {
            cell = grid_size - 1;
        }
        values[cell] = grid_size as f64;
        densities.push(GridDensity::new(values)?);
    }
    ContinuumSystem::new(kappa, sys.w().clone(), densities)
}

/// Either kind of system, as read from or written to the JSON exchange
/// format.
#[derive(Clone, Debug, PartialEq)]
pub enum System {
    Finite(FiniteSystem),
    Continuum(ContinuumSystem),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum SystemJson {
    Finite {
        n: usize,
        w: Vec<Vec<f64>>,
        x: Vec<f64>,
    },
    Continuum {
        kappa: Vec<f64>,
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        grid: usize,
        densities: Vec<Vec<f64>>,
    },
}

impl System {
    pub fn from_json(text: &str) -> Result<System> {
        let parsed: SystemJson = serde_json::from_str(text)?;
        match parsed {
            SystemJson::Finite { n, w, x } => {
                if x.len() != n {
                    return Err(Error::dim(format!(
                        "declared n = {n} but x has length {}",
                        x.len()
                    )));
                }
                if w.len() != n {
                    return Err(Error::dim(format!(
                        "declared n = {n} but w has {} rows",
                        w.len()
                    )));
                }
                Ok(System::Finite(FiniteSystem::from_rows(&w, x)?))
            }
            SystemJson::Continuum {
                kappa,
                w,
                grid,
                densities,
            } => {
                let k = kappa.len();
                if w.len() != k {
                    return Err(Error::dim(format!(
                        "kappa has {k} classes but W has {} rows",
                        w.len()
                    )));
                }
                let mut mat = Array2::zeros((k, k));
                for (i, row) in w.iter().enumerate() {
                    if row.len() != k {
                        return Err(Error::dim(format!(
                            "W row {i} has length {}, expected {k}",
                            row.len()
                        )));
                    }
                    for (j, &v) in row.iter().enumerate() {
                        mat[[i, j]] = v;
                    }
                }
                let dens = densities
                    .into_iter()
                    .enumerate()
                    .map(|(c, values)| {
                        if values.len() != grid {
                            return Err(Error::dim(format!(
                                "densities[{c}] has {} cells, expected grid = {grid}",
                                values.len()
                            )));
                        }
                        GridDensity::new(values)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(System::Continuum(ContinuumSystem::new(kappa, mat, dens)?))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let json = match self {
            System::Finite(sys) => SystemJson::Finite {
                n: sys.n(),
                w: sys.w().outer_iter().map(|row| row.to_vec()).collect(),
                x: sys.x().to_vec(),
            },
            System::Continuum(sys) => SystemJson::Continuum {
                kappa: sys.kappa().to_vec(),
                w: sys.w().outer_iter().map(|row| row.to_vec()).collect(),
                grid: sys.grid_size(),
                densities: sys
                    .densities()
                    .iter()
                    .map(|d| d.values().to_vec())
                    .collect(),
            },
        };
        serde_json::to_string(&json).expect("system serialization cannot fail")
    }

    pub fn validate(&self) -> ValidationReport {
        match self {
            System::Finite(sys) => sys.validate(),
            System::Continuum(sys) => sys.validate(),
        }
    }
}
