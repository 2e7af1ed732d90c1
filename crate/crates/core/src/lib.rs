//! Numerical laboratory for multiscale filtering with correlated observation
//! noise: a slow-fast signal observed through a sensor whose noise is
//! correlated with the slow dynamics, its full particle filter, the
//! homogenized reduced filter, the dual backward equations and a convergence
//! harness that measures how fast the reduced filter approaches the full one
//! as the scale separation grows.

pub mod averaging;
pub mod dual;
pub mod error;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};
