//! Numerical check that `rho_t(v_t)` stays constant along the observation
//! path, pairing a particle filter with the dual solution on the same `dY`.

use serde::Serialize;

use super::grid::GridFunction;
use super::solver::DualSolveResult;
use crate::averaging::HomogenizedModel;
use crate::error::{Error, Result};
use crate::filters::{run_full_filter_observed, run_reduced_filter_observed, FilterConfig, ParticleCloud};
use crate::model::NormalizedModel;
use crate::simulate::{ObservationPath, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityPoint {
    pub step: usize,
    pub t: f64,
    /// `rho_t(v_t)`.
    pub value: f64,
    /// `rho_t(v_t) / rho_0(v_0) - 1`.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityCheck {
    pub points: Vec<DualityPoint>,
}

impl DualityCheck {
    pub fn max_drift(&self) -> f64 {
        self.points.iter().map(|p| p.drift.abs()).fold(0.0, f64::max)
    }
}

/// `rho(v) = rho(1) pi(v)` for the cloud.
pub fn pair(cloud: &ParticleCloud, v: &GridFunction) -> f64 {
    let pi = cloud.expectation(|x, z| v.value_at(x[0], z.first().copied().unwrap_or(0.0)));
    cloud.log_mass().exp() * pi
}

fn collect(
    dual: &DualSolveResult,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    run: impl FnOnce(&FilterConfig, &mut dyn FnMut(usize, &ParticleCloud) -> Result<()>) -> Result<()>,
) -> Result<DualityCheck> {
    let mut steps = cfg.checkpoints.clone();
    steps.sort_unstable();
    steps.dedup();
    if steps.first() != Some(&0) {
        steps.insert(0, 0);
    }
    for &k in &steps {
        if dual.at_step(k).is_none() {
            return Err(Error::Config(format!("the dual solution has no snapshot at step {k}")));
        }
    }
    let cfg = FilterConfig {
        checkpoints: steps,
        test_functions: Vec::new(),
        ..cfg.clone()
    };
    let mut values = Vec::new();
    run(&cfg, &mut |k, cloud| {
        values.push((k, pair(cloud, dual.at_step(k).expect("snapshot checked above"))));
        Ok(())
    })?;
    let base = values[0].1;
    Ok(DualityCheck {
        points: values
            .into_iter()
            .map(|(k, v)| DualityPoint {
                step: k,
                t: obs.grid.time(k),
                value: v,
                drift: v / base - 1.0,
            })
            .collect(),
    })
}

/// Pairs the reduced filter with the averaged dual at the checkpoints of
/// `cfg` (step 0 is always included).
pub fn duality_averaged(
    homog: &HomogenizedModel,
    obs: &ObservationPath,
    dual: &DualSolveResult,
    cfg: &FilterConfig,
    stream: RngStream,
) -> Result<DualityCheck> {
    collect(dual, obs, cfg, |cfg, f| {
        run_reduced_filter_observed(homog, obs, cfg, stream, Some(f)).map(|_| ())
    })
}

/// Pairs the full filter with the full dual.
pub fn duality_full(
    model: &NormalizedModel,
    obs: &ObservationPath,
    dual: &DualSolveResult,
    cfg: &FilterConfig,
    stream: RngStream,
) -> Result<DualityCheck> {
    collect(dual, obs, cfg, |cfg, f| run_full_filter_observed(model, obs, cfg, stream, Some(f)).map(|_| ()))
}
