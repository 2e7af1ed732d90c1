//! Invariant measure of the frozen fast process and the homogenized slow
//! coefficients.

pub mod homogenized;
pub mod invariant;

pub use homogenized::{
    average_samples, centering_check, homogenize, CenteringResidual, ClosedFormSpec, HomogenizationSpec,
    HomogenizedModel, HomogenizedValues, LatticeSpec, LatticeTable, PSD_TOL,
};
pub use invariant::{estimate_invariant_measure, InvariantSamplerConfig, InvariantSamples};
