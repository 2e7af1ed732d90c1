//! Grid solvers for the dual backward equations (slow and fast state each
//! one-dimensional), the duality check against the particle filters, and a
//! Monte Carlo estimate of the first-order corrector.

pub mod corrector;
pub mod duality;
pub mod grid;
pub mod solver;

pub use corrector::{estimate_corrector, expansion_residual, CorrectorConfig, CorrectorEstimate, ResidualReport};
pub use duality::{duality_averaged, duality_full, pair, DualityCheck, DualityPoint};
pub use grid::{Axis, GridFunction};
pub use solver::{boundary_influence, solve_averaged_dual, solve_full_dual, DualSolveResult, FullDualOptions, Stability};
