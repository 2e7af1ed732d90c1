//! Monte Carlo estimate of the first-order corrector `psi` in
//! `v^eps = v^0 + psi + R`, and the remainder `R` read off as a residual.
//!
//! For a probe `(x, z)` the fast process is frozen at `x` and started at `z`.
//! With `T_tau g(z) = E g(x, Z^x_tau)` the corrector is
//!
//! ```text
//! psi_t = int_t^T T_{(s-t)/eps^2}[(b - bbar) v0_x + (a - abar) v0_xx / 2] ds
//!       + int_t^T < T_{(s-t)/eps^2}[(h - hbar) v0 + alpha (sigma - sigbar)^* v0_x], dY_s >
//! ```
//!
//! where `v0` is the averaged dual. Integrands are evaluated at the right end
//! of each step, as in the backward sweep.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::solver::DualSolveResult;
use crate::averaging::{centering_check, estimate_invariant_measure, HomogenizedModel, InvariantSamplerConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Field, NormalizedModel};
use crate::simulate::{FastStepper, ObservationPath, Purpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorConfig {
    /// Number of independent frozen fast paths.
    pub samples: usize,
    /// Euler step of the fast paths, in fast time.
    #[serde(default = "default_fast_dt")]
    pub fast_dt: f64,
    /// Sampler for the centering check at each probe.
    pub centering: InvariantSamplerConfig,
    /// A coefficient counts as centered when its residual is within this many
    /// standard errors.
    #[serde(default = "default_sigmas")]
    pub centering_sigmas: f64,
    /// Drops lags beyond this fast time, where the semigroup has relaxed and
    /// the centered integrands only contribute Monte Carlo noise. `None`
    /// integrates over the whole interval.
    #[serde(default)]
    pub window: Option<f64>,
}

fn default_fast_dt() -> f64 {
    0.01
}

fn default_sigmas() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectorEstimate {
    pub x: f64,
    pub z: f64,
    pub epsilon: f64,
    pub steps: Vec<usize>,
    pub t: Vec<f64>,
    pub psi: Vec<f64>,
    /// Standard error over the fast paths.
    pub se: Vec<f64>,
}

impl CorrectorEstimate {
    /// `(psi, se)` at step `k`, if it was requested.
    pub fn at_step(&self, k: usize) -> Option<(f64, f64)> {
        self.steps.iter().position(|&s| s == k).map(|i| (self.psi[i], self.se[i]))
    }

    /// Trace CSV `t,psi_hat,se`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("t,psi_hat,se\n");
        for i in 0..self.t.len() {
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e}", self.t[i], self.psi[i], self.se[i]);
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Refuses unless `b`, `sigma`, `h` and `sigma sigma^*` are centered at `x`
/// by their averages.
fn check_centering(model: &NormalizedModel, homog: &HomogenizedModel, x: f64, cfg: &CorrectorConfig, stream: RngStream) -> Result<()> {
    let mm = model.model();
    let dims = mm.dims;
    let samples = estimate_invariant_measure(model, &[x], &cfg.centering, stream)?;
    let avg = homog.values_at(&[x])?;
    let a_field = {
        let mut sig = vec![0.0; dims.w];
        let vals: Vec<f64> = samples
            .iter()
            .map(|z| {
                mm.sigma.eval(&[x], z, &mut sig)?;
                Ok(sig.iter().map(|s| s * s).sum())
            })
            .collect::<Result<_>>()?;
        let mean = linalg::shifted_mean(vals.iter().cloned());
        ((mean - avg.abar[0]).abs(), linalg::batch_means_se(&vals, 20))
    };
    let checks: [(&str, &Field, &[f64]); 3] = [("b", &mm.b, &avg.bbar), ("sigma", &mm.sigma, &avg.sigbar), ("h", &mm.h, &avg.hbar)];
    let mut worst: Option<(String, f64, f64)> = None;
    let mut note = |name: &str, r: f64, se: f64| {
        if r > cfg.centering_sigmas * se && worst.as_ref().is_none_or(|w| r / se.max(1e-300) > w.1 / w.2.max(1e-300)) {
            worst = Some((name.to_string(), r, se));
        }
    };
    for (name, field, bar) in checks {
        let res = centering_check(field, bar, &samples)?;
        for (r, se) in res.residual.iter().zip(&res.stderr) {
            note(name, *r, *se);
        }
    }
    note("sigma sigma^*", a_field.0, a_field.1);
    match worst {
        None => Ok(()),
        Some((name, r, se)) => Err(Error::Check(format!(
            "`{name}` is not centered by its average at x = {x}: residual {r:.3e} against standard error {se:.3e}; the corrector estimate would be biased"
        ))),
    }
}

/// Estimates `psi_t(x, z)` at the requested steps. `v0` must hold every step
/// of the averaged dual on the same observation path.
#[allow(clippy::too_many_arguments)]
pub fn estimate_corrector(
    model: &NormalizedModel,
    homog: &HomogenizedModel,
    v0: &DualSolveResult,
    x: f64,
    z: f64,
    obs: &ObservationPath,
    times: &[usize],
    cfg: &CorrectorConfig,
    stream: RngStream,
) -> Result<CorrectorEstimate> {
    let mm = model.model();
    let dims = mm.dims;
    if dims.m != 1 || dims.n != 1 {
        return Err(Error::Config("the corrector estimate needs m = n = 1".into()));
    }
    if cfg.samples < 2 || !(cfg.fast_dt > 0.0) || cfg.window.is_some_and(|w| !(w > 0.0)) {
        return Err(Error::Config("corrector needs at least 2 samples, a positive fast step and a positive window".into()));
    }
    let steps = obs.grid.steps;
    if times.iter().any(|&k| k > steps) {
        return Err(Error::Config("corrector time beyond the end of the observation path".into()));
    }
    let (d, w) = (dims.d, dims.w);
    let dt = obs.grid.dt;
    let eps = model.epsilon();
    let t: Vec<f64> = times.iter().map(|&k| obs.grid.time(k)).collect();
    if homog.is_exact() {
        // Every coefficient difference vanishes identically.
        return Ok(CorrectorEstimate {
            x,
            z,
            epsilon: eps,
            steps: times.to_vec(),
            t,
            psi: vec![0.0; times.len()],
            se: vec![0.0; times.len()],
        });
    }
    check_centering(model, homog, x, cfg, stream.with_purpose(Purpose::Invariant))?;

    // v0 and its derivatives at x on every step.
    let mut dv = Vec::with_capacity(steps + 1);
    for r in 0..=steps {
        let g = v0
            .at_step(r)
            .ok_or_else(|| Error::Config(format!("averaged dual has no snapshot at step {r}")))?;
        dv.push(g.derivatives_at(x));
    }
    let avg = homog.values_at(&[x])?;
    let at = model.alpha_t();
    let first = times.iter().copied().min().unwrap_or(steps);
    let lag_time = dt / (eps * eps);
    let lags = match cfg.window {
        Some(win) => ((win / lag_time).ceil() as usize).min(steps - first),
        None => steps - first,
    };
    let sub = ((lag_time / cfg.fast_dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let delta = lag_time / sub as f64;

    let per_path: Vec<Vec<f64>> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = stream.with_purpose(Purpose::Corrector).child(i).rng();
            let mut stepper = FastStepper::new(mm);
            let mut zs = [z];
            let mut sig = vec![0.0; w];
            let mut hv = vec![0.0; d];
            let mut bv = [0.0];
            // Coefficient differences along the path at lags 1..=lags:
            // [db, da, dh (d), dsig (w)].
            let width = 2 + d + w;
            let mut diff = vec![0.0; lags * width];
            for lag in 0..lags {
                for _ in 0..sub {
                    stepper.step(mm, &[x], &mut zs, delta, delta.sqrt(), &mut rng)?;
                }
                if !zs[0].is_finite() {
                    return Err(Error::abort(lag + 1, "frozen fast path diverged"));
                }
                mm.b.eval(&[x], &zs, &mut bv)?;
                mm.sigma.eval(&[x], &zs, &mut sig)?;
                mm.h.eval(&[x], &zs, &mut hv)?;
                let row = &mut diff[lag * width..(lag + 1) * width];
                row[0] = bv[0] - avg.bbar[0];
                row[1] = sig.iter().map(|s| s * s).sum::<f64>() - avg.abar[0];
                for l in 0..d {
                    row[2 + l] = hv[l] - avg.hbar[l];
                }
                for j in 0..w {
                    row[2 + d + j] = sig[j] - avg.sigbar[j];
                }
            }
            Ok(times
                .iter()
                .map(|&k| {
                    let mut acc = 0.0;
                    for j in k..steps.min(k + lags) {
                        let r = j + 1;
                        let row = &diff[(r - k - 1) * width..(r - k) * width];
                        let [v, v1, v2] = dv[r];
                        acc += dt * (row[0] * v1 + 0.5 * row[1] * v2);
                        let dy = obs.increment(j);
                        for l in 0..d {
                            let mut s = row[2 + l] * v;
                            for jw in 0..w {
                                s += at[jw * d + l] * row[2 + d + jw] * v1;
                            }
                            acc += dy[l] * s;
                        }
                    }
                    acc
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut psi = Vec::with_capacity(times.len());
    let mut se = Vec::with_capacity(times.len());
    for q in 0..times.len() {
        let col: Vec<f64> = per_path.iter().map(|p| p[q]).collect();
        let (m, s) = linalg::mean_se(&col);
        psi.push(m);
        se.push(s);
    }
    Ok(CorrectorEstimate {
        x,
        z,
        epsilon: eps,
        steps: times.to_vec(),
        t,
        psi,
        se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualPoint {
    pub x: f64,
    pub z: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub points: Vec<ResidualPoint>,
    pub mean_abs: f64,
}

/// `R = v^eps - v^0 - psi` at time 0 at each corrector probe.
pub fn expansion_residual(vfull: &DualSolveResult, v0: &DualSolveResult, psi: &[CorrectorEstimate]) -> Result<ResidualReport> {
    let (full, avg) = (vfull.initial(), v0.initial());
    if full.z.is_none() || avg.z.is_some() {
        return Err(Error::Config("expansion residual needs the full dual on an x-z grid and the averaged dual on an x grid".into()));
    }
    let points = psi
        .iter()
        .map(|p| {
            let (c, _) = p
                .at_step(0)
                .ok_or_else(|| Error::Config("corrector estimate does not include t = 0".into()))?;
            Ok(ResidualPoint {
                x: p.x,
                z: p.z,
                residual: full.value_at(p.x, p.z) - avg.value_at(p.x, 0.0) - c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_abs = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.residual.abs()).sum::<f64>() / points.len() as f64
    };
    Ok(ResidualReport { points, mean_abs })
}
