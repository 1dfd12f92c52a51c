//! Mean-field particle systems on weighted interaction graphs.
//!
//! The crate connects three views of the same object: finite systems of
//! interacting agents with a weight matrix, their continuum (graph-limit)
//! description as kernels with per-class densities, and the metrics that
//! make the two comparable — negative Sobolev norms on the torus, cut norms
//! on kernels, circular transport couplings, and tree-indexed observables.
//! On top of that sit the dynamics (an Euler–Maruyama particle integrator
//! and an upwind finite-volume solver for the mean-field PDE) and a small
//! experiment runner used by the `nexmf` binary.

pub mod coupling;
pub mod cutnorm;
pub mod dynamics;
pub mod error;
pub mod experiment;
mod fft;
pub mod seeding;
pub mod system;
pub mod torus;
pub mod trees;

pub use error::{Error, Result};
