//! Weighted particle approximations of the full and homogenized filters, and
//! a Kalman-Bucy reference for linear models.

pub mod cloud;
pub mod engine;
pub mod full;
pub mod kalman;
pub mod reduced;

pub use cloud::{resample_systematic, Particle, ParticleCloud, ResampleOutcome, State, Weights};
pub use engine::{Coupling, FilterConfig, FilterEstimate, FilterRun, Observer};
pub use full::{run_full_filter, run_full_filter_observed};
pub use kalman::{kalman_bucy_oracle, KalmanState, LinearSpec};
pub use reduced::{run_reduced_filter, run_reduced_filter_observed};

#[cfg(test)]
mod tests;
