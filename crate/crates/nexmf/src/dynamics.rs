//! Time integration: Euler–Maruyama for the interacting particle system on
//! the torus and a conservative upwind finite-volume scheme for the
//! class-indexed transport PDE, sharing one registry of coefficient presets
//! with known Lipschitz constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::child_seed;
use crate::system::{discretize_lift, sample_finite, ContinuumSystem, FiniteSystem};
use crate::torus::wrap;

use std::f64::consts::PI;

/// Drift presets μ: 𝕋 → ℝ with their W^{1,∞} constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    Constant { c: f64 },
    SinDrift { a: f64 },
}

impl Drift {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Drift::Zero => 0.0,
            Drift::Constant { c } => *c,
            Drift::SinDrift { a } => a * (2.0 * PI * x).sin(),
        }
    }

    /// Supremum of |μ′|.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Drift::Zero | Drift::Constant { .. } => 0.0,
            Drift::SinDrift { a } => 2.0 * PI * a.abs(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Drift::Zero => "zero".into(),
            Drift::Constant { c } => format!("constant({c})"),
            Drift::SinDrift { a } => format!("sin_drift({a})"),
        }
    }
}

/// Interaction kernel presets σ: 𝕋² → ℝ, acting through y−x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Interaction {
    Zero,
    Kuramoto { k: f64 },
    /// sin(2πu)(1+cos(2πu))/2 in u = y−x: a two-harmonic smooth kernel.
    SmoothBump,
}

impl Interaction {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let u = 2.0 * PI * (y - x);
        match self {
            Interaction::Zero => 0.0,
            Interaction::Kuramoto { k } => k * u.sin(),
            Interaction::SmoothBump => 0.5 * u.sin() * (1.0 + u.cos()),
        }
    }

    /// Supremum of |∂σ/∂x| (equals the y-derivative bound for these
    /// difference kernels).
    pub fn lipschitz(&self) -> f64 {
        match self {
            Interaction::Zero => 0.0,
            Interaction::Kuramoto { k } => 2.0 * PI * k.abs(),
            Interaction::SmoothBump => 2.0 * PI,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Interaction::Zero => "zero".into(),
            Interaction::Kuramoto { k } => format!("kuramoto({k})"),
            Interaction::SmoothBump => "smooth_bump".into(),
        }
    }
}

/// Full coefficient set for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub mu: Drift,
    pub sigma: Interaction,
    pub nu: f64,
}

impl Coefficients {
    pub fn validate(&self) -> Result<()> {
        if !self.nu.is_finite() || self.nu < 0.0 {
            return Err(Error::invalid(format!(
                "diffusion strength must be a finite nonnegative number, got {}",
                self.nu
            )));
        }
        Ok(())
    }
}

/// Uniform time discretization; dt·steps must reproduce t_end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_end > 0.0) {
            return Err(Error::invalid("dt and t_end must be positive"));
        }
        let steps = (t_end / dt).round();
        if steps < 1.0 || (dt * steps - t_end).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "dt {dt} does not divide t_end {t_end} (dt*round = {})",
                dt * steps
            )));
        }
        Ok(TimeGrid {
            dt,
            t_end,
            steps: steps as usize,
        })
    }

    pub fn with_steps(t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("need at least one step"));
        }
        TimeGrid::new(t_end / steps as f64, t_end)
    }
}

/// Standard normal increment for one (agent, step) cell, keyed from the run
/// seed by a counter construction so the value is independent of evaluation
/// order and thread count.
fn noise_increment(seed: u64, agent: usize, step: usize) -> f64 {
    let key = child_seed(child_seed(seed, agent as u64), step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    StandardNormal.sample(&mut rng)
}

fn particle_step_guard(c: &Coefficients, w_max: f64, dt: f64) -> Result<()> {
    let rate = c.mu.lipschitz() + w_max * c.sigma.lipschitz();
    if rate > 0.0 && dt > 0.1 / rate {
        return Err(Error::invalid(format!(
            "dt {dt} exceeds stability guard {} (0.1 / (L_mu + w_max L_sigma))",
            0.1 / rate
        )));
    }
    Ok(())
}

fn drift_field(sys: &FiniteSystem, c: &Coefficients, x: &[f64]) -> Vec<f64> {
    let n = sys.n();
    let inv_n = 1.0 / n as f64;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut interaction = 0.0;
            for j in 0..n {
                let w = sys.w()[[i, j]];
                if w != 0.0 {
                    interaction += w * c.sigma.eval(x[i], x[j]);
                }
            }
            c.mu.eval(x[i]) + inv_n * interaction
        })
        .collect()
}

/// Euler–Maruyama integration of
/// dXᵢ = μ(Xᵢ)dt + (1/N)Σⱼ wᵢⱼ σ(Xᵢ,Xⱼ)dt + ν dBᵢ, wrapped to the torus.
/// The weight matrix is carried through unchanged.
pub fn simulate_particles(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    seed: u64,
) -> Result<FiniteSystem> {
    let (result, _) = integrate_particles(sys0, c, tg, seed, false)?;
    Ok(result)
}

/// As `simulate_particles`, also returning the state after every step
/// (snapshots[k] is the state at time (k+1)·dt).
pub fn simulate_particles_with_trajectory(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    seed: u64,
) -> Result<(FiniteSystem, Vec<Vec<f64>>)> {
    let (result, traj) = integrate_particles(sys0, c, tg, seed, true)?;
    Ok((result, traj))
}

fn integrate_particles(
    sys0: &FiniteSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    seed: u64,
    record: bool,
) -> Result<(FiniteSystem, Vec<Vec<f64>>)> {
    c.validate()?;
    particle_step_guard(c, sys0.w_max(), tg.dt)?;
    let n = sys0.n();
    let mut x: Vec<f64> = sys0.x().to_vec();
    let mut trajectory = Vec::new();
    let noise_scale = c.nu * tg.dt.sqrt();
    for step in 0..tg.steps {
        let force = drift_field(sys0, c, &x);
        for i in 0..n {
            let mut next = x[i] + tg.dt * force[i];
            if noise_scale != 0.0 {
                next += noise_scale * noise_increment(seed, i, step);
            }
            if !next.is_finite() {
                return Err(Error::Numerics(format!(
                    "non-finite state for agent {i} at step {step}"
                )));
            }
            x[i] = wrap(next);
        }
        if record {
            trajectory.push(x.clone());
        }
    }
    let final_sys = FiniteSystem::new(sys0.w().clone(), x)?;
    Ok((final_sys, trajectory))
}

// ---------------------------------------------------------------------------
// PDE side
// ---------------------------------------------------------------------------

/// Per-class velocity field at the G cell edges:
/// V_c(x) = μ(x) + Σ_{c'} κ_{c'} W_{c,c'} ∫ σ(x,y) f_{c'}(y) dy.
///
/// Two-harmonic kernels (kuramoto, smooth bump) use their sin/cos moments,
/// reducing the quadrature to O(G); other kernels fall back to the direct
/// G×G sum.
fn edge_velocities(cont: &ContinuumSystem, c: &Coefficients, densities: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = cont.grid_size();
    let k = cont.k();
    let dx = 1.0 / g as f64;
    let edges: Vec<f64> = (0..g).map(|e| e as f64 * dx).collect();

    // Moments ∫ sin(2π m y) f(y) dy for m = 1, 2 per class (midpoint rule on
    // the step density is exact up to the smooth-factor quadrature error).
    let two_mode = matches!(
        c.sigma,
        Interaction::Kuramoto { .. } | Interaction::SmoothBump
    );
    let moments: Vec<[f64; 4]> = if two_mode {
        densities
            .iter()
            .map(|f| {
                let mut m = [0.0; 4];
                for (j, &fj) in f.iter().enumerate() {
                    let y = (j as f64 + 0.5) * dx;
                    m[0] += (2.0 * PI * y).sin() * fj;
                    m[1] += (2.0 * PI * y).cos() * fj;
                    m[2] += (4.0 * PI * y).sin() * fj;
                    m[3] += (4.0 * PI * y).cos() * fj;
                }
                for v in &mut m {
                    *v *= dx;
                }
                m
            })
            .collect()
    } else {
        Vec::new()
    };

    (0..k)
        .map(|cls| {
            edges
                .iter()
                .map(|&x| {
                    let mut v = c.mu.eval(x);
                    for other in 0..k {
                        let coef = cont.kappa()[other] * cont.w()[[cls, other]];
                        if coef == 0.0 {
                            continue;
                        }
                        let integral = match c.sigma {
                            Interaction::Zero => 0.0,
                            Interaction::Kuramoto { k: kk } => {
                                // ∫ K sin(2π(y−x)) f = K (cos(2πx)·S₁ − sin(2πx)·C₁)
                                let m = &moments[other];
                                kk * ((2.0 * PI * x).cos() * m[0] - (2.0 * PI * x).sin() * m[1])
                            }
                            Interaction::SmoothBump => {
                                // b(u) = sin(2πu)/2 + sin(4πu)/4.
                                let m = &moments[other];
                                0.5 * ((2.0 * PI * x).cos() * m[0] - (2.0 * PI * x).sin() * m[1])
                                    + 0.25
                                        * ((4.0 * PI * x).cos() * m[2]
                                            - (4.0 * PI * x).sin() * m[3])
                            }
                        };
                        v += coef * integral;
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// Direct-quadrature velocity evaluation, used to cross-check the
/// two-harmonic fast path in tests.
#[cfg(test)]
fn edge_velocities_direct(
    cont: &ContinuumSystem,
    c: &Coefficients,
    densities: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let g = cont.grid_size();
    let dx = 1.0 / g as f64;
    (0..cont.k())
        .map(|cls| {
            (0..g)
                .map(|e| {
                    let x = e as f64 * dx;
                    let mut v = c.mu.eval(x);
                    for other in 0..cont.k() {
                        let coef = cont.kappa()[other] * cont.w()[[cls, other]];
                        let mut integral = 0.0;
                        for (j, &fj) in densities[other].iter().enumerate() {
                            let y = (j as f64 + 0.5) * dx;
                            integral += c.sigma.eval(x, y) * fj;
                        }
                        v += coef * integral * dx;
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// Conservative first-order upwind transport with explicit centered
/// diffusion on the periodic grid. Mass per class is conserved to roundoff;
/// the CFL guards keep the update monotone, hence nonnegative.
pub fn solve_vlasov(
    cont0: &ContinuumSystem,
    c: &Coefficients,
    tg: &TimeGrid,
    grid_size: usize,
) -> Result<ContinuumSystem> {
    c.validate()?;
    let g = cont0.grid_size();
    if g != grid_size {
        return Err(Error::dim(format!(
            "system is discretized at {g} cells but {grid_size} were requested; \
             build the initial data at the target resolution"
        )));
    }
    let diffusion_cfl = tg.dt * c.nu * c.nu * (g * g) as f64 / 2.0;
    if diffusion_cfl > 0.45 {
        return Err(Error::invalid(format!(
            "explicit diffusion needs dt·ν²G²/2 ≤ 0.45, got {diffusion_cfl:.3}"
        )));
    }
    let dx = 1.0 / g as f64;
    let mut densities: Vec<Vec<f64>> = cont0
        .densities()
        .iter()
        .map(|d| d.values().to_vec())
        .collect();
    let nu_sq_half = 0.5 * c.nu * c.nu;
    for step in 0..tg.steps {
        let velocities = edge_velocities(cont0, c, &densities);
        let vmax = velocities
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        if tg.dt * vmax > 0.9 * dx {
            return Err(Error::invalid(format!(
                "advection CFL violated at step {step}: dt·max|V| = {:.3e} > {:.3e}",
                tg.dt * vmax,
                0.9 * dx
            )));
        }
        let updated: Vec<Vec<f64>> = densities
            .par_iter()
            .zip(velocities.par_iter())
            .map(|(f, v)| {
                let mut flux = vec![0.0; g];
                // Edge e sits between cells e-1 and e (periodic).
                for e in 0..g {
                    let up = f[(e + g - 1) % g];
                    let down = f[e];
                    flux[e] = if v[e] >= 0.0 { v[e] * up } else { v[e] * down };
                }
                let mut next = vec![0.0; g];
                for j in 0..g {
                    let advect = (flux[(j + 1) % g] - flux[j]) / dx;
                    let diffuse = nu_sq_half
                        * (g * g) as f64
                        * (f[(j + 1) % g] - 2.0 * f[j] + f[(j + g - 1) % g]);
                    next[j] = f[j] + tg.dt * (diffuse - advect);
                }
                next
            })
            .collect();
        densities = updated;
        for (cls, f) in densities.iter().enumerate() {
            let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-12 {
                return Err(Error::Numerics(format!(
                    "class {cls} produced a negative cell {min:.3e} at step {step}"
                )));
            }
            let mass: f64 = f.iter().sum::<f64>() * dx;
            if (mass - 1.0).abs() > 1e-10 {
                return Err(Error::Numerics(format!(
                    "class {cls} mass drifted to {mass} at step {step}"
                )));
            }
        }
    }
    let rebuilt: Result<Vec<crate::torus::GridDensity>> = densities
        .into_iter()
        .map(|f| crate::torus::GridDensity::new(f.into_iter().map(|v| v.max(0.0)).collect()))
        .collect();
    ContinuumSystem::new(cont0.kappa().to_vec(), cont0.w().clone(), rebuilt?)
}

/// How `coupled_run` turns the continuum initial data into finite systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Independent draws from the class mixture.
    Sample,
    /// Deterministic quantile lift (requires N divisible by the class count).
    Lift,
}

/// Everything produced by one joint finite/continuum integration.
#[derive(Debug)]
pub struct CoupledRun {
    pub finals: Vec<FiniteSystem>,
    pub pde: ContinuumSystem,
}

/// Builds a finite system of every requested size from the continuum data,
/// integrates each under the shared coefficients, and integrates the PDE
/// itself; seeds are per-size (noise) and the scheme picks sampling or the
/// quantile lift.
pub fn coupled_run(
    cont0: &ContinuumSystem,
    n_list: &[usize],
    c: &Coefficients,
    tg: &TimeGrid,
    seeds: &[u64],
    scheme: InitScheme,
) -> Result<CoupledRun> {
    if n_list.len() != seeds.len() {
        return Err(Error::dim(format!(
            "{} sizes but {} seeds",
            n_list.len(),
            seeds.len()
        )));
    }
    let mut finals = Vec::with_capacity(n_list.len());
    for (&n, &seed) in n_list.iter().zip(seeds) {
        let start = match scheme {
            InitScheme::Sample => sample_finite(cont0, n, seed)?,
            InitScheme::Lift => {
                let k = cont0.k();
                if n % k != 0 {
                    return Err(Error::invalid(format!(
                        "lift initialization needs N divisible by the class count {k}, got {n}"
                    )));
                }
                discretize_lift(cont0, n / k)?
            }
        };
        finals.push(simulate_particles(&start, c, tg, seed)?);
    }
    let pde = solve_vlasov(cont0, c, tg, cont0.grid_size())?;
    Ok(CoupledRun { finals, pde })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{torus_dist, GridDensity};
    use ndarray::{array, Array2};

    fn flat_system(n: usize, xs: Vec<f64>) -> FiniteSystem {
        FiniteSystem::new(Array2::from_elem((n, n), 1.0), xs).unwrap()
    }

    fn cos_density(g: usize, amp: f64, phase: f64) -> GridDensity {
        // Exact cell averages of 1 + amp·cos(2π(x−phase)).
        let dx = 1.0 / g as f64;
        let values: Vec<f64> = (0..g)
            .map(|j| {
                let a = j as f64 * dx - phase;
                let b = a + dx;
                1.0 + amp * ((2.0 * PI * b).sin() - (2.0 * PI * a).sin()) / (2.0 * PI * dx)
            })
            .collect();
        GridDensity::new(values).unwrap()
    }

    #[test]
    fn free_particles_stay_put() {
        let sys = flat_system(4, vec![0.1, 0.3, 0.6, 0.9]);
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Zero,
            nu: 0.0,
        };
        let tg = TimeGrid::new(0.05, 1.0).unwrap();
        let out = simulate_particles(&sys, &c, &tg, 7).unwrap();
        assert_eq!(out.x(), sys.x());
    }

    #[test]
    fn constant_drift_translates_exactly() {
        let sys = flat_system(3, vec![0.0, 0.25, 0.9]);
        let c = Coefficients {
            mu: Drift::Constant { c: 1.0 },
            sigma: Interaction::Zero,
            nu: 0.0,
        };
        let tg = TimeGrid::new(0.003, 0.3).unwrap();
        let out = simulate_particles(&sys, &c, &tg, 0).unwrap();
        for (a, b) in out.x().iter().zip(sys.x()) {
            assert!(
                torus_dist(*a, wrap(b + 0.3)) < 1e-12,
                "expected {b}+0.3 mod 1, got {a}"
            );
        }
    }

    #[test]
    fn hand_checked_kuramoto_step() {
        let sys = flat_system(2, vec![0.0, 0.25]);
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Kuramoto { k: 1.0 },
            nu: 0.0,
        };
        let tg = TimeGrid::new(1e-3, 1e-3).unwrap();
        let out = simulate_particles(&sys, &c, &tg, 0).unwrap();
        // dX₁/dt = ½(σ(0,0)+σ(0,¼)) = ½ sin(π/2) = ½ and symmetrically −½.
        assert!((out.x()[0] - 0.0005).abs() < 1e-15);
        assert!((out.x()[1] - 0.2495).abs() < 1e-15);
    }

    #[test]
    fn stability_guard_rejects_large_steps() {
        let sys = flat_system(2, vec![0.0, 0.5]);
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Kuramoto { k: 1.0 },
            nu: 0.0,
        };
        // Guard is 0.1/(2π) ≈ 0.0159.
        let tg = TimeGrid::new(0.05, 1.0).unwrap();
        assert!(simulate_particles(&sys, &c, &tg, 0).is_err());
    }

    #[test]
    fn states_remain_wrapped_and_runs_are_reproducible() {
        let sys = flat_system(5, vec![0.01, 0.2, 0.45, 0.7, 0.99]);
        let c = Coefficients {
            mu: Drift::SinDrift { a: 0.4 },
            sigma: Interaction::Kuramoto { k: 0.8 },
            nu: 0.5,
        };
        let tg = TimeGrid::new(0.005, 0.5).unwrap();
        let (out1, traj) = simulate_particles_with_trajectory(&sys, &c, &tg, 99).unwrap();
        for snapshot in &traj {
            for &x in snapshot {
                assert!((0.0..1.0).contains(&x));
            }
        }
        let out2 = simulate_particles(&sys, &c, &tg, 99).unwrap();
        assert_eq!(out1.x(), out2.x());
        let out3 = simulate_particles(&sys, &c, &tg, 100).unwrap();
        assert_ne!(out1.x(), out3.x());
    }

    #[test]
    fn deterministic_flow_converges_at_first_order() {
        let sys = flat_system(6, vec![0.05, 0.15, 0.4, 0.55, 0.72, 0.9]);
        let c = Coefficients {
            mu: Drift::SinDrift { a: 0.3 },
            sigma: Interaction::Kuramoto { k: 0.5 },
            nu: 0.0,
        };
        let run = |steps: usize| {
            let tg = TimeGrid::with_steps(0.8, steps).unwrap();
            simulate_particles(&sys, &c, &tg, 0).unwrap()
        };
        let coarse = run(160);
        let medium = run(320);
        let fine = run(640);
        let err = |a: &FiniteSystem, b: &FiniteSystem| {
            a.x()
                .iter()
                .zip(b.x())
                .map(|(p, q)| torus_dist(*p, *q))
                .fold(0.0f64, f64::max)
        };
        let ratio = err(&coarse, &medium) / err(&medium, &fine);
        assert!(
            (1.6..=2.4).contains(&ratio),
            "refinement ratio {ratio} outside the first-order band"
        );
    }

    #[test]
    fn two_agent_kuramoto_matches_the_closed_form() {
        // For w ≡ 1, μ = 0 the gap Δ = X₂−X₁ obeys Δ' = −K sin(2πΔ), so
        // tan(πΔ(t)) = tan(πΔ₀)·e^{−2πKt}, while the mean stays fixed.
        let sys = flat_system(2, vec![0.1, 0.35]);
        let k = 0.7;
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Kuramoto { k },
            nu: 0.0,
        };
        let t_end = 0.5;
        let tg = TimeGrid::with_steps(t_end, 8000).unwrap();
        let out = simulate_particles(&sys, &c, &tg, 0).unwrap();
        let delta0 = 0.25;
        let expected_delta = (PI * delta0).tan() * (-2.0 * PI * k * t_end).exp();
        let delta = out.x()[1] - out.x()[0];
        assert!(
            ((PI * delta).tan() - expected_delta).abs() < 2e-4,
            "gap {delta} vs closed form"
        );
        let mean0 = (0.1 + 0.35) / 2.0;
        let mean = (out.x()[0] + out.x()[1]) / 2.0;
        assert!((mean - mean0).abs() < 1e-12);
    }

    fn single_class(density: GridDensity) -> ContinuumSystem {
        ContinuumSystem::new(vec![1.0], array![[1.0]], vec![density]).unwrap()
    }

    #[test]
    fn transport_free_pde_is_the_identity() {
        let cont = single_class(cos_density(64, 0.5, 0.3));
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Zero,
            nu: 0.0,
        };
        let tg = TimeGrid::new(0.01, 0.5).unwrap();
        let out = solve_vlasov(&cont, &c, &tg, 64).unwrap();
        assert_eq!(out.densities()[0].values(), cont.densities()[0].values());
    }

    #[test]
    fn upwind_translation_error_halves_with_resolution() {
        let speed = 0.37;
        let t_end = 0.5;
        let c = Coefficients {
            mu: Drift::Constant { c: speed },
            sigma: Interaction::Zero,
            nu: 0.0,
        };
        let l1_error = |g: usize| {
            let cont = single_class(cos_density(g, 0.5, 0.2));
            let tg = TimeGrid::with_steps(t_end, 4 * g).unwrap();
            let out = solve_vlasov(&cont, &c, &tg, g).unwrap();
            let shifted = cos_density(g, 0.5, wrap(0.2 + speed * t_end));
            out.densities()[0]
                .values()
                .iter()
                .zip(shifted.values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / g as f64
        };
        let e64 = l1_error(64);
        let e128 = l1_error(128);
        let ratio = e64 / e128;
        assert!(
            (1.6..=2.4).contains(&ratio),
            "L1 errors {e64} vs {e128}, ratio {ratio}"
        );
    }

    #[test]
    fn diffusion_damps_fourier_modes_like_the_heat_kernel() {
        let g = 256;
        let nu = 0.15;
        let t_end = 0.4;
        // Initial data with energy in modes 1..4.
        let dx = 1.0 / g as f64;
        let values: Vec<f64> = (0..g)
            .map(|j| {
                let x = (j as f64 + 0.5) * dx;
                1.0 + 0.4 * (2.0 * PI * x).cos()
                    + 0.25 * (2.0 * PI * 2.0 * x).sin()
                    + 0.15 * (2.0 * PI * 3.0 * x).cos()
                    + 0.1 * (2.0 * PI * 4.0 * x).sin()
            })
            .collect();
        let cont = single_class(GridDensity::new(values).unwrap());
        let c = Coefficients {
            mu: Drift::Zero,
            sigma: Interaction::Zero,
            nu,
        };
        let dt_cap = 0.9 / (nu * nu * (g * g) as f64);
        let steps = (t_end / dt_cap).ceil() as usize;
        let tg = TimeGrid::with_steps(t_end, steps).unwrap();
        let out = solve_vlasov(&cont, &c, &tg, g).unwrap();
        let mode_amp = |f: &[f64], m: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in f.iter().enumerate() {
                let ang = 2.0 * PI * m as f64 * (j as f64 + 0.5) * dx;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt() * dx
        };
        for m in 1..=4usize {
            let before = mode_amp(cont.densities()[0].values(), m);
            let after = mode_amp(out.densities()[0].values(), m);
            let predicted = (-2.0 * PI * PI * nu * nu * (m * m) as f64 * t_end).exp();
            let observed = after / before;
            assert!(
                (observed - predicted).abs() <= 0.02 * predicted,
                "mode {m}: observed decay {observed}, heat kernel {predicted}"
            );
        }
    }

    #[test]
    fn pde_conserves_mass_and_positivity_with_interactions() {
        let cont = ContinuumSystem::new(
            vec![0.5, 0.5],
            array![[1.0, 0.5], [0.5, 1.0]],
            vec![cos_density(128, 0.5, 0.0), cos_density(128, -0.3, 0.25)],
        )
        .unwrap();
        let c = Coefficients {
            mu: Drift::SinDrift { a: 0.5 },
            sigma: Interaction::Kuramoto { k: 1.0 },
            nu: 0.1,
        };
        let tg = TimeGrid::with_steps(1.0, 800).unwrap();
        let out = solve_vlasov(&cont, &c, &tg, 128).unwrap();
        for d in out.densities() {
            assert!((d.mass() - 1.0).abs() < 1e-10);
            assert!(d.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn kuramoto_fast_path_matches_direct_quadrature() {
        let cont = ContinuumSystem::new(
            vec![0.6, 0.4],
            array![[1.0, 0.2], [0.2, 0.7]],
            vec![cos_density(64, 0.4, 0.1), cos_density(64, 0.3, 0.6)],
        )
        .unwrap();
        let densities: Vec<Vec<f64>> = cont
            .densities()
            .iter()
            .map(|d| d.values().to_vec())
            .collect();
        for sigma in [Interaction::Kuramoto { k: 0.9 }, Interaction::SmoothBump] {
            let c = Coefficients {
                mu: Drift::SinDrift { a: 0.2 },
                sigma,
                nu: 0.0,
            };
            let fast = edge_velocities(&cont, &c, &densities);
            let slow = edge_velocities_direct(&cont, &c, &densities);
            for (vf, vs) in fast.iter().zip(&slow) {
                for (a, b) in vf.iter().zip(vs) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn advection_cfl_violation_is_reported() {
        let cont = single_class(cos_density(128, 0.5, 0.0));
        let c = Coefficients {
            mu: Drift::Constant { c: 2.0 },
            sigma: Interaction::Zero,
            nu: 0.0,
        };
        // dt·|V| = 0.02 > 0.9/128.
        let tg = TimeGrid::new(0.01, 0.5).unwrap();
        let err = solve_vlasov(&cont, &c, &tg, 128).unwrap_err().to_string();
        assert!(err.contains("CFL"), "{err}");
    }

    #[test]
    fn coupled_run_is_deterministic_and_decouples_without_interaction() {
        let cont = ContinuumSystem::new(
            vec![0.5, 0.5],
            array![[1.0, 0.5], [0.5, 1.0]],
            vec![cos_density(64, 0.5, 0.0), cos_density(64, -0.3, 0.25)],
        )
        .unwrap();
        let c = Coefficients {
            mu: Drift::SinDrift { a: 0.3 },
            sigma: Interaction::Zero,
            nu: 0.2,
        };
        let tg = TimeGrid::with_steps(0.25, 100).unwrap();
        let run1 = coupled_run(&cont, &[8, 16], &c, &tg, &[5, 6], InitScheme::Sample).unwrap();
        let run2 = coupled_run(&cont, &[8, 16], &c, &tg, &[5, 6], InitScheme::Sample).unwrap();
        for (a, b) in run1.finals.iter().zip(&run2.finals) {
            assert_eq!(a.x(), b.x());
        }
        assert_eq!(
            run1.pde.densities()[0].values(),
            run2.pde.densities()[0].values()
        );

        // With sigma = 0 the weights are irrelevant to the states.
        let other_w = ContinuumSystem::new(
            cont.kappa().to_vec(),
            array![[0.2, 0.9], [0.9, 0.1]],
            cont.densities().to_vec(),
        )
        .unwrap();
        let run3 = coupled_run(&other_w, &[8, 16], &c, &tg, &[5, 6], InitScheme::Sample).unwrap();
        for (a, b) in run1.finals.iter().zip(&run3.finals) {
            assert_eq!(a.x(), b.x());
        }

        // Lift initialization requires divisibility.
        assert!(coupled_run(&cont, &[7], &c, &tg, &[1], InitScheme::Lift).is_err());
        let lifted = coupled_run(&cont, &[8], &c, &tg, &[1], InitScheme::Lift).unwrap();
        assert_eq!(lifted.finals[0].n(), 8);
    }
}
