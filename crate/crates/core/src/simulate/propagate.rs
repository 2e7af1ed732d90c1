//! Signal propagation under the reference measure, where the observation is a
//! standard Brownian motion and the slow noise is rebuilt from it.

use rand::Rng;
use rand_distr::StandardNormal;

use super::fast::FastStepper;
use super::grid::TimeGrid;
use super::path::ObservationPath;
use super::rng::RngStream;
use crate::error::{Error, Result};
use crate::model::expr::EvalError;
use crate::model::NormalizedModel;

/// Per-particle scratch space for [`FullStep::advance`].
#[derive(Debug, Clone)]
pub struct FullScratch {
    b: Vec<f64>,
    sigma: Vec<f64>,
    h: Vec<f64>,
    resid: Vec<f64>,
    dw: Vec<f64>,
    xi: Vec<f64>,
    x_old: Vec<f64>,
    fast: FastStepper,
}

/// Outcome of one coarse step of a particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeight {
    /// `<h, dY> - |h|^2 dt / 2` at the left point.
    pub log_increment: f64,
    /// `|h|` at the left point.
    pub h_norm: f64,
}

/// One coarse step of the full signal driven by an observation increment:
/// `dW = alpha^* (dY - h dt) + Gamma dW_perp`, so that
/// `dX = (b - sigma alpha^* h) dt + sigma (alpha^* dY + Gamma dW_perp)`, and
/// the fast component is subcycled with independent noise.
#[derive(Debug, Clone, Copy)]
pub struct FullStep<'a> {
    model: &'a NormalizedModel,
    dt: f64,
    sqdt: f64,
    substeps: usize,
    fast_dt: f64,
    fast_sd: f64,
}

impl<'a> FullStep<'a> {
    pub fn new(model: &'a NormalizedModel, grid: &TimeGrid) -> Self {
        let eps = model.epsilon();
        let substeps = grid.substeps(eps);
        let delta = grid.dt / substeps as f64;
        FullStep {
            model,
            dt: grid.dt,
            sqdt: grid.dt.sqrt(),
            substeps,
            fast_dt: delta / (eps * eps),
            fast_sd: delta.sqrt() / eps,
        }
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn scratch(&self) -> FullScratch {
        let d = self.model.dims();
        FullScratch {
            b: vec![0.0; d.m],
            sigma: vec![0.0; d.m * d.w],
            h: vec![0.0; d.d],
            resid: vec![0.0; d.d],
            dw: vec![0.0; d.w],
            xi: vec![0.0; d.w],
            x_old: vec![0.0; d.m],
            fast: FastStepper::new(self.model.model()),
        }
    }

    /// Advances `(x, z)` across one coarse step. Draws exactly `w` normals
    /// from `slow` and `substeps * v` normals from `fast`.
    #[inline]
    pub fn advance<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &self,
        x: &mut [f64],
        z: &mut [f64],
        dy: &[f64],
        slow: &mut R1,
        fast: &mut R2,
        s: &mut FullScratch,
    ) -> Result<StepWeight, EvalError> {
        let nm = self.model;
        let mm = nm.model();
        let dims = mm.dims;
        let (m, w, d) = (dims.m, dims.w, dims.d);
        mm.b.eval(x, z, &mut s.b)?;
        mm.sigma.eval(x, z, &mut s.sigma)?;
        mm.h.eval(x, z, &mut s.h)?;

        let mut inner = 0.0;
        let mut h2 = 0.0;
        for i in 0..d {
            inner += s.h[i] * dy[i];
            h2 += s.h[i] * s.h[i];
            s.resid[i] = dy[i] - s.h[i] * self.dt;
        }
        for xi in s.xi.iter_mut() {
            *xi = self.sqdt * slow.sample::<f64, _>(StandardNormal);
        }
        let at = nm.alpha_t();
        let gp = nm.gamma_perp();
        for j in 0..w {
            let mut acc = 0.0;
            for i in 0..d {
                acc += at[j * d + i] * s.resid[i];
            }
            for l in 0..w {
                acc += gp[j * w + l] * s.xi[l];
            }
            s.dw[j] = acc;
        }
        s.x_old.copy_from_slice(x);
        for i in 0..m {
            let mut acc = s.b[i] * self.dt;
            for j in 0..w {
                acc += s.sigma[i * w + j] * s.dw[j];
            }
            x[i] += acc;
        }
        for _ in 0..self.substeps {
            s.fast.step(mm, &s.x_old, z, self.fast_dt, self.fast_sd, fast)?;
        }
        Ok(StepWeight {
            log_increment: inner - 0.5 * h2 * self.dt,
            h_norm: h2.sqrt(),
        })
    }
}

/// A signal path generated under the reference measure along a given
/// observation path.
#[derive(Debug, Clone)]
pub struct SignalPath {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Accumulated log-likelihood of the observation path.
    pub log_weight: Vec<f64>,
}

/// Runs [`FullStep`] along the whole observation path for one particle drawn
/// from the initial law.
pub fn resimulate_with_observation(
    model: &NormalizedModel,
    grid: &TimeGrid,
    stream: RngStream,
    obs: &ObservationPath,
) -> Result<SignalPath> {
    if obs.grid != *grid || obs.d != model.dims().d {
        return Err(Error::Config("observation path does not match the time grid".into()));
    }
    let mm = model.model();
    let (m, n) = (mm.dims.m, mm.dims.n);
    let step = FullStep::new(model, grid);
    let mut scratch = step.scratch();
    let mut init = stream.child(0).rng();
    let mut slow = stream.child(1).rng();
    let mut fast = stream.child(2).rng();
    let mut x = vec![0.0; m];
    let mut z = vec![0.0; n];
    mm.initial_law.sample_x(&mut init, &mut x);
    mm.initial_law.sample_z(&mut init, &mut z);
    let mut out = SignalPath {
        x: Vec::with_capacity((grid.steps + 1) * m),
        z: Vec::with_capacity((grid.steps + 1) * n),
        log_weight: Vec::with_capacity(grid.steps + 1),
    };
    out.x.extend_from_slice(&x);
    out.z.extend_from_slice(&z);
    out.log_weight.push(0.0);
    let mut lw = 0.0;
    for k in 0..grid.steps {
        let sw = step.advance(&mut x, &mut z, obs.increment(k), &mut slow, &mut fast, &mut scratch)?;
        lw += sw.log_increment;
        if x.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::abort(k + 1, "non-finite particle state"));
        }
        out.x.extend_from_slice(&x);
        out.z.extend_from_slice(&z);
        out.log_weight.push(lw);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::{normalize_correlation, Field, Marginal};
    use crate::simulate::path::simulate_joint;
    use crate::simulate::rng::Purpose;

    /// Brownian observation path, as under the reference measure.
    fn brownian_obs(grid: &TimeGrid, seed: u64) -> ObservationPath {
        let mut rng = RngStream::new(seed, Purpose::Test, 99).rng();
        let dy = (0..grid.steps)
            .map(|_| grid.dt.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ObservationPath { grid: *grid, d: 1, dy }
    }

    #[test]
    fn uncorrelated_propagation_ignores_observation() {
        let m = crate::model::tests::scalar_model(0.0, 1.0);
        let nm = normalize_correlation(&m).unwrap();
        let grid = TimeGrid::new(1.0, 50, 0.1).unwrap();
        let a = resimulate_with_observation(&nm, &grid, RngStream::new(1, Purpose::Test, 0), &brownian_obs(&grid, 1)).unwrap();
        let b = resimulate_with_observation(&nm, &grid, RngStream::new(1, Purpose::Test, 0), &brownian_obs(&grid, 2)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn zero_sensor_reproduces_prior_law() {
        // With h = 0 the reference and original measures coincide, so
        // particles driven by a Brownian Y follow the prior.
        let mut m = crate::model::tests::scalar_model(0.5, 0.8);
        m.h = Field::parse(1, 1, (1, 1), &["0"]).unwrap();
        m.b = Field::parse(1, 1, (1, 1), &["-x1 + 0.5*tanh(z1)"]).unwrap();
        m.initial_law.x = vec![Marginal::Point(0.5)];
        let nm = normalize_correlation(&m).unwrap();
        let grid = TimeGrid::new(1.0, 100, 0.1).unwrap();
        let reps = 4000;
        let mut a = Vec::with_capacity(reps);
        let mut b = Vec::with_capacity(reps);
        for r in 0..reps as u64 {
            let joint = simulate_joint(&nm, &grid, RngStream::new(3, Purpose::Path, r)).unwrap();
            a.push(joint.x[grid.steps]);
            let obs = brownian_obs(&grid, 1000 + r);
            let p = resimulate_with_observation(&nm, &grid, RngStream::new(4, Purpose::Test, r), &obs).unwrap();
            b.push(p.x[grid.steps]);
        }
        let (ma, sa) = linalg::mean_se(&a);
        let (mb, sb) = linalg::mean_se(&b);
        assert!((ma - mb).abs() <= 4.0 * (sa * sa + sb * sb).sqrt(), "{ma} vs {mb}");
        let va: Vec<f64> = a.iter().map(|v| (v - ma).powi(2)).collect();
        let vb: Vec<f64> = b.iter().map(|v| (v - mb).powi(2)).collect();
        let (ma2, sa2) = linalg::mean_se(&va);
        let (mb2, sb2) = linalg::mean_se(&vb);
        assert!((ma2 - mb2).abs() <= 4.0 * (sa2 * sa2 + sb2 * sb2).sqrt(), "{ma2} vs {mb2}");
    }

    #[test]
    fn rejects_mismatched_grid() {
        let nm = normalize_correlation(&crate::model::tests::scalar_model(0.0, 1.0)).unwrap();
        let grid = TimeGrid::new(1.0, 50, 0.1).unwrap();
        let other = TimeGrid::new(1.0, 40, 0.1).unwrap();
        assert!(resimulate_with_observation(&nm, &grid, RngStream::new(1, Purpose::Test, 0), &brownian_obs(&other, 1)).is_err());
    }
}
