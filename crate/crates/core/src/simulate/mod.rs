//! Sample paths of the slow-fast signal, the observation and the frozen-`x`
//! fast process.

pub mod fast;
pub mod grid;
pub mod path;
pub mod propagate;
pub mod rng;

pub use fast::{simulate_frozen_fast, FastStepper};
pub use grid::{TimeGrid, DEFAULT_FAST_FACTOR};
pub use path::{simulate_joint, ObservationPath, PathBundle};
pub use propagate::{resimulate_with_observation, FullScratch, FullStep, SignalPath, StepWeight};
pub use rng::{Purpose, RngStream};
