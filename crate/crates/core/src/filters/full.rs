//! Full filter: particles carry both scales and are propagated under the
//! reference measure along the observation path.

use rand_chacha::ChaCha8Rng;

use super::engine::{self, Coupling, FilterConfig, FilterRun, Kernel, Observer};
use crate::error::Result;
use crate::model::expr::EvalError;
use crate::model::NormalizedModel;
use crate::simulate::{FullScratch, FullStep, ObservationPath, Purpose, RngStream, StepWeight};

struct FullKernel<'a> {
    model: &'a NormalizedModel,
    step: FullStep<'a>,
}

impl Kernel for FullKernel<'_> {
    type Scratch = FullScratch;

    fn dims(&self) -> (usize, usize) {
        let d = self.model.dims();
        (d.m, d.n)
    }

    fn purposes(&self, _coupling: Coupling) -> [Purpose; 3] {
        [Purpose::FilterInitial, Purpose::FilterSlow, Purpose::FilterFast]
    }

    fn scratch(&self) -> FullScratch {
        self.step.scratch()
    }

    fn init(&self, rng: &mut ChaCha8Rng, x: &mut [f64], z: &mut [f64]) {
        let law = &self.model.model().initial_law;
        law.sample_x(rng, x);
        law.sample_z(rng, z);
    }

    #[inline]
    fn advance(
        &self,
        x: &mut [f64],
        z: &mut [f64],
        dy: &[f64],
        slow: &mut ChaCha8Rng,
        aux: &mut ChaCha8Rng,
        scratch: &mut FullScratch,
    ) -> Result<StepWeight, EvalError> {
        self.step.advance(x, z, dy, slow, aux, scratch)
    }
}

/// Weighted particle approximation of the full filter on one observation
/// path. `stream` identifies the replication; particles derive their own
/// sub-streams from it.
pub fn run_full_filter(
    model: &NormalizedModel,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    stream: RngStream,
) -> Result<FilterRun> {
    run_full_filter_observed(model, obs, cfg, stream, None)
}

/// As [`run_full_filter`], calling `observer` with the cloud at every
/// checkpoint.
pub fn run_full_filter_observed(
    model: &NormalizedModel,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    stream: RngStream,
    observer: Option<&mut Observer<'_>>,
) -> Result<FilterRun> {
    if obs.d != model.dims().d {
        return Err(crate::Error::Config("observation dimension does not match the model".into()));
    }
    let kernel = FullKernel {
        model,
        step: FullStep::new(model, &obs.grid),
    };
    engine::run(&kernel, obs, cfg, stream, observer)
}
