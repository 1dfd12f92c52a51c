//! Analysis on the unit circle ℝ/ℤ: the wrapped exponential kernel Λ, its
//! H^{-s} cousins on uniform grids, and negative-Sobolev inner products
//! between atomic and grid-sampled measures.
//!
//! Everything downstream (system lifts, couplings, tree observables, the
//! particle/PDE consistency checks) measures distances through this module,
//! so the wrap convention lives here and nowhere else: canonical
//! representatives in `[0,1)`, distances through the minimum image.

use crate::error::{ensure_finite, Error, Result};
use crate::fft;

/// Default series cutoff for Λ evaluations. The truncation error is below
/// `e^{-40} ≈ 4e-18`, which double precision cannot resolve next to Λ ≈ 1.
pub const DEFAULT_TRUNCATION: u32 = 40;

/// Atoms whose positions agree within this tolerance (per coordinate, in the
/// torus metric) are treated as coincident and merged.
pub const MERGE_TOLERANCE: f64 = 1e-12;

/// Pair budget under which atomic distances use the exact double sum; above
/// it the measures are binned to a grid first.
const EXACT_PAIR_CAP: usize = 4_000_000;

/// Canonical representative of `x` in `[0,1)`.
pub fn wrap(x: f64) -> f64 {
    let y = x - x.floor();
    // x slightly below an integer can round the difference up to exactly 1.
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Distance on ℝ/ℤ via the minimum image; always in `[0, 1/2]`.
pub fn torus_dist(x: f64, y: f64) -> f64 {
    let d = (wrap(x) - wrap(y)).abs();
    d.min(1.0 - d)
}

/// A point on the circle ℝ/ℤ, stored as its representative in `[0,1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusPoint(f64);

impl TorusPoint {
    pub fn new(x: f64) -> Self {
        TorusPoint(wrap(x))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn dist(self, other: TorusPoint) -> f64 {
        torus_dist(self.0, other.0)
    }
}

impl From<f64> for TorusPoint {
    fn from(x: f64) -> Self {
        TorusPoint::new(x)
    }
}

/// Extrema of the kernel Λ together with the series cutoff they were
/// computed at. Λ attains its maximum at 0 and its minimum at 1/2.
#[derive(Clone, Copy, Debug)]
pub struct LambdaConstants {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub truncation: u32,
}

impl LambdaConstants {
    /// `√Λ_max`, the H⁻¹ norm of a single unit Dirac mass.
    pub fn sqrt_max(&self) -> f64 {
        self.lambda_max.sqrt()
    }
}

/// The wrapped exponential kernel `Λ(x) = Σ_{|l| ≤ L} ½ e^{-|x+l|}`,
/// truncated at `truncation` terms per side.
///
/// The truncation error is bounded by `e^{-L}`; the minimum cutoff of 10
/// already gives 4 to 5 correct digits and the default of
/// [`DEFAULT_TRUNCATION`] is exact to double precision.
pub fn lambda1(x: impl Into<TorusPoint>, truncation: u32) -> Result<f64> {
    if truncation < 10 {
        return Err(Error::invalid(format!(
            "lambda1 requires truncation >= 10, got {truncation}"
        )));
    }
    let x = x.into().value();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("lambda1 input x = {x}")));
    }
    let mut sum = 0.0;
    let l_max = truncation as i64;
    for l in -l_max..=l_max {
        sum += 0.5 * (-(x + l as f64).abs()).exp();
    }
    Ok(sum)
}

/// Closed form of the full (untruncated) series: for `x` in `[0,1]`,
/// `Λ(x) = cosh(x - 1/2) / (2 sinh(1/2))`.
pub fn lambda_closed(x: impl Into<TorusPoint>) -> f64 {
    let x = x.into().value();
    (x - 0.5).cosh() / (2.0 * 0.5_f64.sinh())
}

/// Λ evaluated at a known torus distance `d ∈ [0, 1/2]`.
#[inline]
pub(crate) fn lambda_at_dist(d: f64) -> f64 {
    (d - 0.5).cosh() / (2.0 * 0.5_f64.sinh())
}

/// Maximum and minimum of Λ, attained at 0 and 1/2 respectively.
pub fn lambda_extrema(truncation: u32) -> Result<LambdaConstants> {
    Ok(LambdaConstants {
        lambda_max: lambda1(0.0, truncation)?,
        lambda_min: lambda1(0.5, truncation)?,
        truncation,
    })
}

/// A real function on the circle sampled on a uniform grid of `G` cells;
/// `values[j]` is the cell average over `[j/G, (j+1)/G)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("grid density needs at least one cell"));
        }
        ensure_finite(&values, "grid density values")?;
        Ok(GridDensity { values })
    }

    pub fn uniform(grid_size: usize) -> Self {
        GridDensity {
            values: vec![1.0; grid_size.max(1)],
        }
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Total integral `Σ values / G`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Checks that the density is a probability density: nonnegative values
    /// and unit mass within `tol`.
    pub fn validate_probability(&self, tol: f64) -> Result<()> {
        if let Some((i, &v)) = self.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::invalid(format!(
                "density is negative at cell {i}: {v}"
            )));
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > tol {
            return Err(Error::invalid(format!(
                "density mass {mass} differs from 1 by more than {tol}"
            )));
        }
        Ok(())
    }
}

fn sinc(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        t.sin() / t
    }
}

/// Sobolev weight `(1 + 4π² m²)^{-s}` for integer mode `m`.
pub(crate) fn sobolev_multiplier(m: i64, s: f64) -> f64 {
    let m = m as f64;
    (1.0 + 4.0 * std::f64::consts::PI.powi(2) * m * m).powf(-s)
}

/// Cell averages of the kernel `Λ_s` with Fourier coefficients
/// `(1 + 4π² m²)^{-s}`, truncated at `mode_cutoff` modes.
///
/// Each cell value is the exact average of the truncated series over the
/// cell, so the total integral is exactly the zeroth coefficient, 1. For
/// `s = 1` this reproduces Λ itself up to the mode truncation.
pub fn lambda_s_grid(s: f64, grid_size: usize, mode_cutoff: usize) -> Result<GridDensity> {
    if !(s > 0.25) {
        return Err(Error::invalid(format!(
            "lambda_s_grid requires s > 1/4 (kernel is not square-integrable otherwise), got {s}"
        )));
    }
    if grid_size < 16 {
        return Err(Error::invalid(format!(
            "lambda_s_grid requires grid_size >= 16, got {grid_size}"
        )));
    }
    if 2 * mode_cutoff < grid_size {
        return Err(Error::invalid(format!(
            "lambda_s_grid requires mode_cutoff >= grid_size/2, got {mode_cutoff} < {grid_size}/2"
        )));
    }
    let g = grid_size as f64;
    let pi = std::f64::consts::PI;
    // Averaging e^{2πimx} over a cell multiplies it by sinc(πm/G); the
    // m and -m terms combine into a cosine at the cell midpoint.
    let mut values = vec![0.0; grid_size];
    for (j, v) in values.iter_mut().enumerate() {
        let mid = (j as f64 + 0.5) / g;
        let mut acc = 1.0;
        for m in 1..=mode_cutoff {
            let mf = m as f64;
            acc += 2.0
                * sobolev_multiplier(m as i64, s)
                * sinc(pi * mf / g)
                * (2.0 * pi * mf * mid).cos();
        }
        *v = acc;
    }
    GridDensity::new(values)
}

/// A signed atomic measure on the torus of some arity `k`: finitely many
/// weighted Dirac masses on `T^k`. Positions are stored flat, `k` numbers
/// per atom, each wrapped to `[0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicMeasure {
    arity: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomicMeasure {
    /// Builds a measure from flat positions (`arity` coordinates per atom,
    /// wrapped on construction) and one signed weight per atom.
    pub fn new(arity: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if arity == 0 {
            return Err(Error::invalid("atomic measure arity must be positive"));
        }
        if positions.len() != arity * weights.len() {
            return Err(Error::dim(format!(
                "expected {} coordinates for {} atoms of arity {}, got {}",
                arity * weights.len(),
                weights.len(),
                arity,
                positions.len()
            )));
        }
        ensure_finite(&positions, "atom positions")?;
        ensure_finite(&weights, "atom weights")?;
        let positions = positions.into_iter().map(wrap).collect();
        Ok(AtomicMeasure {
            arity,
            positions,
            weights,
        })
    }

    /// Convenience constructor for arity-1 measures.
    pub fn univariate(positions: &[f64], weights: &[f64]) -> Result<Self> {
        AtomicMeasure::new(1, positions.to_vec(), weights.to_vec())
    }

    /// A single unit mass at the given point of `T^k`.
    pub fn dirac(position: &[f64]) -> Result<Self> {
        AtomicMeasure::new(position.len(), position.to_vec(), vec![1.0])
    }

    /// Uniform empirical measure of `points` on the circle (weight `1/n` each).
    pub fn empirical(points: &[f64]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::invalid("empirical measure of an empty sample"));
        }
        AtomicMeasure::univariate(points, &vec![1.0 / n as f64; n])
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.arity..(i + 1) * self.arity]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Returns the measure with all atoms scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> AtomicMeasure {
        AtomicMeasure {
            arity: self.arity,
            positions: self.positions.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// The signed difference `self - other` as a single measure.
    pub fn signed_difference(&self, other: &AtomicMeasure) -> Result<AtomicMeasure> {
        if self.arity != other.arity {
            return Err(Error::dim(format!(
                "arity mismatch: {} vs {}",
                self.arity, other.arity
            )));
        }
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        let mut weights = self.weights.clone();
        weights.extend(other.weights.iter().map(|w| -w));
        Ok(AtomicMeasure {
            arity: self.arity,
            positions,
            weights,
        })
    }

    /// Merges atoms whose positions coincide within [`MERGE_TOLERANCE`] in
    /// every coordinate, adding their weights. All Sobolev norms are
    /// invariant under this operation (up to the tolerance).
    pub fn merge_coincident(&self) -> AtomicMeasure {
        let k = self.arity;
        let mut positions: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        'atoms: for i in 0..self.len() {
            let p = self.position(i);
            for j in 0..weights.len() {
                let q = &positions[j * k..(j + 1) * k];
                if p
                    .iter()
                    .zip(q)
                    .all(|(&a, &b)| torus_dist(a, b) <= MERGE_TOLERANCE)
                {
                    weights[j] += self.weights[i];
                    continue 'atoms;
                }
            }
            positions.extend_from_slice(p);
            weights.push(self.weights[i]);
        }
        AtomicMeasure {
            arity: k,
            positions,
            weights,
        }
    }

    /// Mass-preserving assignment of every atom to the grid cell containing
    /// it, on a grid of `grid_size` cells per coordinate. Returns cell
    /// averages (masses scaled by cell volume).
    pub fn bin_to_grid(&self, grid_size: usize) -> Result<GridTensor> {
        if grid_size == 0 {
            return Err(Error::invalid("grid_size must be positive"));
        }
        let cells = checked_grid_len(self.arity, grid_size)?;
        let mut masses = vec![0.0; cells];
        let g = grid_size as f64;
        for i in 0..self.len() {
            let mut flat = 0usize;
            for &c in self.position(i) {
                let mut cell = (c * g) as usize;
                if cell >= grid_size {
                    cell = grid_size - 1;
                }
                flat = flat * grid_size + cell;
            }
            masses[flat] += self.weights[i];
        }
        let vol_inv = g.powi(self.arity as i32);
        GridTensor::new(
            self.arity,
            grid_size,
            masses.into_iter().map(|m| m * vol_inv).collect(),
        )
    }
}

fn checked_grid_len(arity: usize, grid_size: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..arity {
        total = total.checked_mul(grid_size).ok_or_else(|| {
            Error::invalid(format!(
                "grid of size {grid_size}^{arity} does not fit in memory"
            ))
        })?;
    }
    Ok(total)
}

/// A real function on `T^k` sampled as cell averages on a uniform grid with
/// `grid_size` cells per coordinate, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTensor {
    arity: usize,
    grid_size: usize,
    values: Vec<f64>,
}

impl GridTensor {
    pub fn new(arity: usize, grid_size: usize, values: Vec<f64>) -> Result<Self> {
        if arity == 0 {
            return Err(Error::invalid("grid tensor arity must be positive"));
        }
        let expect = checked_grid_len(arity, grid_size)?;
        if values.len() != expect {
            return Err(Error::dim(format!(
                "grid tensor of arity {arity} and size {grid_size} needs {expect} values, got {}",
                values.len()
            )));
        }
        ensure_finite(&values, "grid tensor values")?;
        Ok(GridTensor {
            arity,
            grid_size,
            values,
        })
    }

    pub fn from_density(density: &GridDensity) -> GridTensor {
        GridTensor {
            arity: 1,
            grid_size: density.grid_size(),
            values: density.values().to_vec(),
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Total integral (mean value, since values are cell averages of a
    /// density with respect to Lebesgue measure of total volume 1).
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Per-cell masses: cell average times cell volume.
    pub(crate) fn cell_masses(&self) -> Vec<f64> {
        let vol = 1.0 / self.values.len() as f64;
        self.values.iter().map(|v| v * vol).collect()
    }
}

/// Either representation of a measure on `T^k` accepted by the distance
/// routines: an atomic measure or a grid of cell averages.
#[derive(Clone, Debug)]
pub enum MeasureRep {
    Atomic(AtomicMeasure),
    Grid(GridTensor),
}

impl MeasureRep {
    pub fn arity(&self) -> usize {
        match self {
            MeasureRep::Atomic(a) => a.arity(),
            MeasureRep::Grid(g) => g.arity(),
        }
    }
}

impl From<AtomicMeasure> for MeasureRep {
    fn from(a: AtomicMeasure) -> Self {
        MeasureRep::Atomic(a)
    }
}

impl From<GridTensor> for MeasureRep {
    fn from(g: GridTensor) -> Self {
        MeasureRep::Grid(g)
    }
}

impl From<GridDensity> for MeasureRep {
    fn from(d: GridDensity) -> Self {
        MeasureRep::Grid(GridTensor::from_density(&d))
    }
}

/// H⁻¹ inner product of two atomic measures of equal arity, as the exact
/// double sum `Σ_{a,b} w_a w_b Π_i Λ(x_i - y_i)` over atom pairs.
pub fn h_neg1_tensor_inner(a: &AtomicMeasure, b: &AtomicMeasure) -> Result<f64> {
    if a.arity() != b.arity() {
        return Err(Error::dim(format!(
            "arity mismatch: {} vs {}",
            a.arity(),
            b.arity()
        )));
    }
    let k = a.arity();
    let mut acc = 0.0;
    for i in 0..a.len() {
        let xi = a.position(i);
        let wi = a.weights()[i];
        if wi == 0.0 {
            continue;
        }
        for j in 0..b.len() {
            let yj = b.position(j);
            let mut prod = b.weights()[j];
            for d in 0..k {
                prod *= lambda_at_dist(torus_dist(xi[d], yj[d]));
            }
            acc += wi * prod;
        }
    }
    Ok(acc)
}

/// H^{-s} inner product of two mass arrays over the same grid, summed over
/// the representable Fourier modes of the grid.
pub(crate) fn spectral_h_inner(
    masses_a: &[f64],
    masses_b: &[f64],
    arity: usize,
    grid_size: usize,
    s: f64,
) -> f64 {
    let shape = vec![grid_size; arity];
    let fa = fft::dft_nd(masses_a, &shape);
    let fb = fft::dft_nd(masses_b, &shape);
    let mult: Vec<f64> = (0..grid_size)
        .map(|j| sobolev_multiplier(fft::signed_mode(j, grid_size), s))
        .collect();
    let mut acc = 0.0;
    for (flat, (ca, cb)) in fa.iter().zip(&fb).enumerate() {
        let mut m = 1.0;
        let mut rem = flat;
        for _ in 0..arity {
            m *= mult[rem % grid_size];
            rem /= grid_size;
        }
        acc += m * (ca * cb.conj()).re;
    }
    acc
}

fn grid_pair_masses(a: &GridTensor, b: &GridTensor) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if a.grid_size() != b.grid_size() {
        return Err(Error::dim(format!(
            "grid sizes differ: {} vs {}",
            a.grid_size(),
            b.grid_size()
        )));
    }
    Ok((a.cell_masses(), b.cell_masses(), a.arity(), a.grid_size()))
}

/// Grid resolution used when an atomic input has to be binned: fine for low
/// arity, coarser as the cell count grows like `G^k`.
fn default_bin_grid(arity: usize) -> usize {
    match arity {
        1 => 4096,
        2 => 512,
        3 => 64,
        _ => 16,
    }
}

/// H⁻¹ distance between two measures of equal arity.
///
/// Atomic pairs below a size cap are handled by the exact bilinear
/// expansion; larger atomic inputs, grids, and mixed pairs go through
/// mass-preserving binning and the spectral product. Mixed pairs are binned
/// to the grid operand's resolution so the two sides are discretized
/// identically.
pub fn h_neg1_dist(a: &MeasureRep, b: &MeasureRep) -> Result<f64> {
    if a.arity() != b.arity() {
        return Err(Error::dim(format!(
            "arity mismatch: {} vs {}",
            a.arity(),
            b.arity()
        )));
    }
    let sq = match (a, b) {
        (MeasureRep::Atomic(ma), MeasureRep::Atomic(mb)) => {
            let total = ma.len() + mb.len();
            if total * total <= EXACT_PAIR_CAP {
                h_neg1_tensor_inner(ma, ma)? - 2.0 * h_neg1_tensor_inner(ma, mb)?
                    + h_neg1_tensor_inner(mb, mb)?
            } else {
                let g = default_bin_grid(ma.arity());
                let (xa, xb, k, g) =
                    grid_pair_masses(&ma.bin_to_grid(g)?, &mb.bin_to_grid(g)?)?;
                let diff: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p - q).collect();
                spectral_h_inner(&diff, &diff, k, g, 1.0)
            }
        }
        (MeasureRep::Grid(ga), MeasureRep::Grid(gb)) => {
            let (xa, xb, k, g) = grid_pair_masses(ga, gb)?;
            let diff: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p - q).collect();
            spectral_h_inner(&diff, &diff, k, g, 1.0)
        }
        (MeasureRep::Atomic(ma), MeasureRep::Grid(gb)) => {
            let (xa, xb, k, g) = grid_pair_masses(&ma.bin_to_grid(gb.grid_size())?, gb)?;
            let diff: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p - q).collect();
            spectral_h_inner(&diff, &diff, k, g, 1.0)
        }
        (MeasureRep::Grid(ga), MeasureRep::Atomic(mb)) => {
            let (xa, xb, k, g) = grid_pair_masses(ga, &mb.bin_to_grid(ga.grid_size())?)?;
            let diff: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p - q).collect();
            spectral_h_inner(&diff, &diff, k, g, 1.0)
        }
    };
    Ok(sq.max(0.0).sqrt())
}

/// H^{-s} norm of a grid density, using the DFT of the cell values and the
/// weight `(1 + 4π² m²)^{-s}` over the grid's representable modes.
pub fn h_neg_s_norm_grid(f: &GridDensity, s: f64) -> Result<f64> {
    if !(s > 0.25) {
        return Err(Error::invalid(format!(
            "h_neg_s_norm_grid requires s > 1/4, got {s}"
        )));
    }
    let g = f.grid_size();
    let masses: Vec<f64> = f.values().iter().map(|v| v / g as f64).collect();
    let coeffs = fft::dft_1d(&masses);
    let mut acc = 0.0;
    for (j, c) in coeffs.iter().enumerate() {
        acc += sobolev_multiplier(fft::signed_mode(j, g), s) * c.norm_sqr();
    }
    Ok(acc.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Closed forms used as independent oracles:
    //   Λ(0)   = 1/2 + 1/(e-1)
    //   Λ(1/2) = e^{-1/2} / (1 - e^{-1})
    fn oracle_lambda0() -> f64 {
        0.5 + 1.0 / (std::f64::consts::E - 1.0)
    }

    fn oracle_lambda_half() -> f64 {
        (-0.5_f64).exp() / (1.0 - (-1.0_f64).exp())
    }

    #[test]
    fn wrap_and_distance_conventions() {
        assert_eq!(wrap(0.25), 0.25);
        assert_eq!(wrap(1.0), 0.0);
        assert_eq!(wrap(-0.25), 0.75);
        assert_eq!(wrap(3.25), 0.25);
        assert!(wrap(-1e-18) < 1.0);
        assert!((torus_dist(0.1, 0.9) - 0.2).abs() < 1e-15);
        assert!((torus_dist(0.0, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(torus_dist(0.3, 0.3), 0.0);
    }

    #[test]
    fn lambda_at_zero_matches_closed_form() {
        let v = lambda1(0.0, 40).unwrap();
        assert!((v - 1.0819767069).abs() < 1e-9);
        assert!((v - oracle_lambda0()).abs() < 1e-14);
    }

    #[test]
    fn lambda_at_half_matches_closed_form() {
        let v = lambda1(0.5, 40).unwrap();
        assert!((v - 0.9595173757).abs() < 1e-9);
        assert!((v - oracle_lambda_half()).abs() < 1e-14);
    }

    #[test]
    fn lambda_series_is_symmetric() {
        let a = lambda1(0.25, 40).unwrap();
        let b = lambda1(0.75, 40).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lambda_rejects_small_truncation() {
        assert!(lambda1(0.3, 9).is_err());
        assert!(lambda1(0.3, 10).is_ok());
    }

    #[test]
    fn extrema_and_dirac_norm() {
        let c = lambda_extrema(40).unwrap();
        assert!((c.lambda_max - 1.0819767069).abs() < 1e-9);
        assert!((c.lambda_min - 0.9595173757).abs() < 1e-9);
        assert!(c.lambda_min < c.lambda_max);
        assert!((c.sqrt_max() - 1.0401811).abs() < 1e-6);
    }

    #[test]
    fn lambda_s_grid_matches_series_for_s_one() {
        let grid = lambda_s_grid(1.0, 256, 512).unwrap();
        let mut worst = 0.0_f64;
        for (j, &v) in grid.values().iter().enumerate() {
            let mid = (j as f64 + 0.5) / 256.0;
            worst = worst.max((v - lambda1(mid, 40).unwrap()).abs());
        }
        assert!(worst < 1e-6, "max deviation {worst}");
    }

    #[test]
    fn lambda_s_grid_peaks_at_zero_and_integrates_to_one() {
        for s in [0.5, 1.0, 2.0] {
            let grid = lambda_s_grid(s, 256, 256).unwrap();
            let max = grid.values().iter().cloned().fold(f64::MIN, f64::max);
            assert!(grid.values()[0] >= max - 1e-12);
            assert!((grid.mass() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn lambda_s_grid_rejects_bad_parameters() {
        assert!(lambda_s_grid(0.25, 256, 256).is_err());
        assert!(lambda_s_grid(0.1, 256, 256).is_err());
        assert!(lambda_s_grid(1.0, 8, 256).is_err());
        assert!(lambda_s_grid(1.0, 256, 100).is_err());
    }

    #[test]
    fn inner_product_of_diracs() {
        let d = AtomicMeasure::dirac(&[0.3]).unwrap();
        let v = h_neg1_tensor_inner(&d, &d).unwrap();
        assert!((v - 1.0819767).abs() < 1e-6);

        // Arity 2: the tensor kernel factorizes, so the squared Dirac norm
        // is the square of the arity-1 value. Oracle via the series route.
        let d2 = AtomicMeasure::dirac(&[0.1, 0.2]).unwrap();
        let v2 = h_neg1_tensor_inner(&d2, &d2).unwrap();
        assert!((v2 - 1.1706736).abs() < 1e-6);
        let series = lambda1(0.0, 40).unwrap();
        assert!((v2 - series * series).abs() < 1e-12);

        let a = AtomicMeasure::dirac(&[0.0]).unwrap();
        let b = AtomicMeasure::dirac(&[0.5]).unwrap();
        let cross = h_neg1_tensor_inner(&a, &b).unwrap();
        assert!((cross - oracle_lambda_half()).abs() < 1e-12);
    }

    #[test]
    fn inner_product_rejects_arity_mismatch() {
        let a = AtomicMeasure::dirac(&[0.1]).unwrap();
        let b = AtomicMeasure::dirac(&[0.1, 0.2]).unwrap();
        assert!(h_neg1_tensor_inner(&a, &b).is_err());
        assert!(h_neg1_dist(&a.clone().into(), &b.clone().into()).is_err());
    }

    #[test]
    fn dirac_separation_distance() {
        let a = AtomicMeasure::dirac(&[0.0]).unwrap();
        let b = AtomicMeasure::dirac(&[0.5]).unwrap();
        let d = h_neg1_dist(&a.clone().into(), &b.into()).unwrap();
        // Expanding the bilinear form: ‖δ_0 - δ_{1/2}‖² = 2(Λ(0) - Λ(1/2)).
        let oracle = (2.0 * (oracle_lambda0() - oracle_lambda_half())).sqrt();
        assert!((d - 0.4949).abs() < 1e-3);
        assert!((d - oracle).abs() < 1e-12);
        let z = h_neg1_dist(&a.clone().into(), &a.into()).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn probability_norms_stay_below_dirac_norm() {
        // The uniform density has H⁻¹ norm exactly 1; any non-Dirac
        // probability measure stays strictly below √Λ_max.
        let uniform = GridDensity::uniform(128);
        let norm = h_neg_s_norm_grid(&uniform, 1.0).unwrap();
        assert!((norm - 1.0).abs() < 1e-12);
        let sqrt_max = lambda_extrema(40).unwrap().sqrt_max();
        assert!(norm < sqrt_max);

        let spread = AtomicMeasure::univariate(&[0.1, 0.6], &[0.5, 0.5]).unwrap();
        let n2 = h_neg1_tensor_inner(&spread, &spread).unwrap().sqrt();
        assert!(n2 < sqrt_max);

        // Mixed atomic/grid distance is positive and well below the
        // diameter bound 2√Λ_max.
        let d = h_neg1_dist(
            &AtomicMeasure::dirac(&[0.25]).unwrap().into(),
            &uniform.into(),
        )
        .unwrap();
        assert!(d > 0.0 && d < 2.0 * sqrt_max);
    }

    #[test]
    fn norm_of_two_mode_density() {
        // f(x) = 1 + cos(2πx) sampled at cell midpoints: the DFT recovers
        // the two modes exactly, so the norm is √(1 + ½ (1+4π²)^{-s}).
        let g = 64;
        let values: Vec<f64> = (0..g)
            .map(|j| {
                let x = (j as f64 + 0.5) / g as f64;
                1.0 + (2.0 * std::f64::consts::PI * x).cos()
            })
            .collect();
        let f = GridDensity::new(values).unwrap();
        for s in [0.3, 1.0, 2.0] {
            let expect =
                (1.0 + 0.5 * (1.0 + 4.0 * std::f64::consts::PI.powi(2)).powf(-s)).sqrt();
            let got = h_neg_s_norm_grid(&f, s).unwrap();
            assert!((got - expect).abs() < 1e-12, "s={s}: {got} vs {expect}");
        }
    }

    #[test]
    fn narrow_bump_norm_approaches_dirac_norm() {
        let mut prev = 0.0;
        for g in [512, 4096] {
            let mut values = vec![0.0; g];
            values[0] = g as f64;
            let f = GridDensity::new(values).unwrap();
            let norm = h_neg_s_norm_grid(&f, 1.0).unwrap();
            assert!(norm > prev);
            prev = norm;
        }
        assert!((prev - 1.0401811).abs() < 1e-4);
    }

    #[test]
    fn binned_distance_tracks_exact_distance() {
        // Two empirical measures far below the pair cap, recomputed through
        // the binning path by hand: the spectral value must sit within the
        // O(1/G) binning error of the exact one.
        let xs: Vec<f64> = (0..30).map(|i| wrap(0.037 * i as f64)).collect();
        let ys: Vec<f64> = (0..30).map(|i| wrap(0.51 + 0.029 * i as f64)).collect();
        let a = AtomicMeasure::empirical(&xs).unwrap();
        let b = AtomicMeasure::empirical(&ys).unwrap();
        let exact = h_neg1_dist(&a.clone().into(), &b.clone().into()).unwrap();

        let ga = a.bin_to_grid(4096).unwrap();
        let gb = b.bin_to_grid(4096).unwrap();
        let binned = h_neg1_dist(&ga.into(), &gb.into()).unwrap();
        assert!((exact - binned).abs() < 2e-3, "{exact} vs {binned}");
    }

    #[test]
    fn merging_coincident_atoms_preserves_norms() {
        let a = AtomicMeasure::univariate(&[0.2, 0.2, 0.7], &[0.3, 0.4, 0.3]).unwrap();
        let merged = a.merge_coincident();
        assert_eq!(merged.len(), 2);
        assert!((merged.total_mass() - a.total_mass()).abs() < 1e-15);
        let na = h_neg1_tensor_inner(&a, &a).unwrap();
        let nm = h_neg1_tensor_inner(&merged, &merged).unwrap();
        assert!((na - nm).abs() < 1e-12);
    }

    #[test]
    fn binning_preserves_mass() {
        let a = AtomicMeasure::new(
            2,
            vec![0.12, 0.99, 0.5, 0.5, 0.77, 0.03],
            vec![0.2, -0.5, 1.3],
        )
        .unwrap();
        let g = a.bin_to_grid(32).unwrap();
        assert!((g.mass() - a.total_mass()).abs() < 1e-12);
    }

    #[test]
    fn grid_density_probability_validation() {
        let ok = GridDensity::uniform(32);
        assert!(ok.validate_probability(1e-12).is_ok());
        let neg = GridDensity::new(vec![2.0, -0.1, 1.0, 1.1]).unwrap();
        assert!(neg.validate_probability(1e-6).is_err());
        let off = GridDensity::new(vec![1.0, 1.0, 1.0, 1.5]).unwrap();
        assert!(off.validate_probability(1e-6).is_err());
    }
}
