//! Checks run next to the study: the duality identity for both filters and
//! the epsilon scaling of the corrector.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::config::{CorrectorCheckConfig, DualCheckConfig, ExperimentConfig};
use crate::averaging::HomogenizedModel;
use crate::dual::{duality_averaged, duality_full, estimate_corrector, solve_averaged_dual, solve_full_dual, DualityCheck};
use crate::error::Result;
use crate::filters::{Coupling, FilterConfig};
use crate::model::{normalize_correlation, MultiscaleModel, TestFunction};
use crate::simulate::{simulate_joint, ObservationPath, Purpose, RngStream};

/// Index offset that keeps the check streams apart from the study's
/// replication streams.
const CHECK_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualCheckReport {
    pub epsilon: f64,
    pub averaged: DualityCheck,
    pub full: DualityCheck,
    pub tolerance: f64,
    pub passed: bool,
}

/// Simulates one path at the check's epsilon, solves both duals from the
/// Gaussian terminal condition and pairs each with its particle filter.
pub fn run_dual_check(cfg: &ExperimentConfig, base: &MultiscaleModel, dc: &DualCheckConfig) -> Result<DualCheckReport> {
    let nm = normalize_correlation(&base.with_epsilon(dc.epsilon)?)?;
    let homog = cfg.homogenize(&nm)?;
    let grid = cfg.grid()?;
    let path = simulate_joint(&nm, &grid, RngStream::new(cfg.seed, Purpose::Path, CHECK_STREAM))?;
    let obs = &path.obs;
    let phi = TestFunction::gaussian(vec![dc.center], dc.scale);
    let mut checkpoints: Vec<usize> = dc.times.iter().map(|&t| grid.index_of(t)).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let fc = FilterConfig {
        particles: dc.particles,
        resampling: None,
        checkpoints: checkpoints.clone(),
        test_functions: Vec::new(),
        coupling: Coupling::Common,
    };
    let stream = RngStream::new(cfg.seed, Purpose::FilterInitial, CHECK_STREAM);
    let v0 = solve_averaged_dual(&homog, &phi, obs, dc.x_axis)?;
    let averaged = duality_averaged(&homog, obs, &v0, &fc, stream.child(1))?;
    drop(v0);
    // Only the checkpoint snapshots are needed from the full dual.
    let stride = checkpoints.iter().fold(grid.steps, |g, &k| gcd(g, k)).max(1);
    let opts = crate::dual::FullDualOptions {
        snapshot_stride: stride,
        ..dc.full_dual
    };
    let ve = solve_full_dual(&nm, &phi, obs, dc.x_axis, dc.z_axis, &opts)?;
    let full = duality_full(&nm, obs, &ve, &fc, stream.child(2))?;
    let passed = averaged.max_drift() <= dc.tolerance && full.max_drift() <= dc.tolerance;
    Ok(DualCheckReport {
        epsilon: dc.epsilon,
        averaged,
        full,
        tolerance: dc.tolerance,
        passed,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectorPath {
    /// `psi_0` at each probe for `epsilon` and `epsilon / 2`.
    pub psi: [Vec<f64>; 2],
    pub se: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectorScaling {
    pub epsilon: f64,
    /// Mean of `|psi_0|` over paths and probes at `epsilon` and `epsilon / 2`.
    pub mean_abs: [f64; 2],
    pub ratio: f64,
    pub band: [f64; 2],
    pub passed: bool,
    pub paths: Vec<CorrectorPath>,
}

/// Brownian observation increments: the law of `Y` under the reference
/// measure, on which the corrector is defined path by path.
fn reference_path(grid: crate::simulate::TimeGrid, d: usize, stream: RngStream) -> ObservationPath {
    let mut rng = stream.rng();
    let sq = grid.dt.sqrt();
    let dy = (0..grid.steps * d).map(|_| sq * rng.sample::<f64, _>(StandardNormal)).collect();
    ObservationPath { grid, d, dy }
}

/// Estimates `psi_0` at every probe for `epsilon` and `epsilon / 2` on the
/// same observation paths and with the same fast-path streams, and compares
/// the mean magnitudes.
pub fn run_corrector_scaling(
    cfg: &ExperimentConfig,
    base: &MultiscaleModel,
    homog: &HomogenizedModel,
    cc: &CorrectorCheckConfig,
) -> Result<CorrectorScaling> {
    let grid = cfg.grid()?;
    let models = [
        normalize_correlation(&base.with_epsilon(cc.epsilon)?)?,
        normalize_correlation(&base.with_epsilon(cc.epsilon / 2.0)?)?,
    ];
    let phi = TestFunction::gaussian(vec![cc.center], cc.scale);
    let mut paths = Vec::with_capacity(cc.paths);
    let mut total = [0.0; 2];
    for p in 0..cc.paths as u64 {
        let obs = reference_path(grid, base.dims.d, RngStream::new(cfg.seed, Purpose::Path, CHECK_STREAM + 1 + p));
        let v0 = solve_averaged_dual(homog, &phi, &obs, cc.x_axis)?;
        let mut psi = [Vec::new(), Vec::new()];
        let mut se = [Vec::new(), Vec::new()];
        for (q, nm) in models.iter().enumerate() {
            for (i, &[x, z]) in cc.probes.iter().enumerate() {
                let stream = RngStream::new(cfg.seed, Purpose::Corrector, CHECK_STREAM + p).child(i as u64);
                let est = estimate_corrector(nm, homog, &v0, x, z, &obs, &[0], &cc.corrector, stream)?;
                total[q] += est.psi[0].abs();
                psi[q].push(est.psi[0]);
                se[q].push(est.se[0]);
            }
        }
        paths.push(CorrectorPath { psi, se });
    }
    let count = (cc.paths * cc.probes.len()) as f64;
    let mean_abs = [total[0] / count, total[1] / count];
    let ratio = mean_abs[0] / mean_abs[1];
    Ok(CorrectorScaling {
        epsilon: cc.epsilon,
        mean_abs,
        ratio,
        band: cc.ratio_band,
        passed: ratio >= cc.ratio_band[0] && ratio <= cc.ratio_band[1],
        paths,
    })
}
