//! Joint simulation of the signal and the observation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::fast::FastStepper;
use super::grid::TimeGrid;
use super::rng::RngStream;
use crate::error::{Error, Result};
use crate::model::{Dims, NormalizedModel};

/// Observation increments `dY_k = Y_{k+1} - Y_k` on a grid, with `Y_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub grid: TimeGrid,
    pub d: usize,
    pub dy: Vec<f64>,
}

impl ObservationPath {
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.dy[k * self.d..(k + 1) * self.d]
    }

    /// Cumulative values `Y_0 = 0, Y_1, ..., Y_N`.
    pub fn cumulative(&self) -> Vec<f64> {
        let d = self.d;
        let mut y = vec![0.0; (self.grid.steps + 1) * d];
        for k in 0..self.grid.steps {
            for i in 0..d {
                y[(k + 1) * d + i] = y[k * d + i] + self.dy[k * d + i];
            }
        }
        y
    }

    /// `sum_k |dY_k|`, the path variation entering the Girsanov weight bound.
    pub fn variation(&self) -> f64 {
        self.dy
            .chunks(self.d)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum()
    }
}

/// One realization of signal, observation and driving noise.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub dims: Dims,
    pub epsilon: f64,
    pub substeps: usize,
    /// `(steps + 1) x m`.
    pub x: Vec<f64>,
    /// `(steps + 1) x n`.
    pub z: Vec<f64>,
    pub obs: ObservationPath,
    /// `steps x w`.
    pub dw: Vec<f64>,
    /// `steps x u`.
    pub du: Vec<f64>,
    /// `steps x substeps x v`.
    pub dv: Vec<f64>,
    pub stream: RngStream,
}

impl PathBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.obs.grid
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.dims.m..(k + 1) * self.dims.m]
    }

    pub fn z_at(&self, k: usize) -> &[f64] {
        &self.z[k * self.dims.n..(k + 1) * self.dims.n]
    }

    /// Rebuilds every observation increment from the stored state and noise
    /// and reports the first step that does not match bitwise.
    pub fn reconstruction_mismatch(&self, model: &NormalizedModel) -> Result<Option<usize>> {
        let mm = model.model();
        let Dims { d, w, u, .. } = self.dims;
        let dt = self.grid().dt;
        let mut h = vec![0.0; d];
        let mut dy = vec![0.0; d];
        for k in 0..self.grid().steps {
            mm.h.eval(self.x_at(k), self.z_at(k), &mut h)?;
            observation_increment(&mm.alpha, &mm.gamma, &h, dt, &self.dw[k * w..(k + 1) * w], &self.du[k * u..(k + 1) * u], &mut dy);
            if dy.as_slice() != self.obs.increment(k) {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }

    /// CSV with header `t,x1..xm,z1..zn,y1..yd`, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let Dims { m, n, d, .. } = self.dims;
        let mut s = String::from("t");
        for (p, c) in [("x", m), ("z", n), ("y", d)] {
            for i in 1..=c {
                let _ = write!(s, ",{p}{i}");
            }
        }
        s.push('\n');
        let y = self.obs.cumulative();
        for k in 0..=self.grid().steps {
            let _ = write!(s, "{:.16e}", self.grid().time(k));
            for v in self.x_at(k).iter().chain(self.z_at(k)).chain(&y[k * d..(k + 1) * d]) {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// `dY = h dt + alpha dW + gamma dU`, in a fixed evaluation order.
#[inline]
fn observation_increment(alpha: &[f64], gamma: &[f64], h: &[f64], dt: f64, dw: &[f64], du: &[f64], out: &mut [f64]) {
    let (w, u) = (dw.len(), du.len());
    for (i, o) in out.iter_mut().enumerate() {
        let mut b = 0.0;
        for j in 0..w {
            b += alpha[i * w + j] * dw[j];
        }
        for j in 0..u {
            b += gamma[i * u + j] * du[j];
        }
        *o = h[i] * dt + b;
    }
}

/// Euler-Maruyama for `(X, Y)` on the coarse grid with the fast component
/// subcycled at `dt / substeps <= c_f epsilon^2`. The slow, observation and
/// fast noises come from separate sub-streams so that paths for different
/// `epsilon` share their slow and observation noise.
pub fn simulate_joint(model: &NormalizedModel, grid: &TimeGrid, stream: RngStream) -> Result<PathBundle> {
    let mm = model.model();
    let dims = mm.dims;
    let Dims { m, n, d, w, u, v } = dims;
    let eps = mm.epsilon;
    let steps = grid.steps;
    let dt = grid.dt;
    let sub = grid.substeps(eps);
    let delta = dt / sub as f64;
    let (fast_dt, fast_scale) = (delta / (eps * eps), 1.0 / eps);

    let mut init_rng = stream.child(0).rng();
    let mut w_rng = stream.child(1).rng();
    let mut u_rng = stream.child(2).rng();
    let mut v_rng = stream.child(3).rng();

    let mut x = vec![0.0; (steps + 1) * m];
    let mut z = vec![0.0; (steps + 1) * n];
    mm.initial_law.sample_x(&mut init_rng, &mut x[..m]);
    mm.initial_law.sample_z(&mut init_rng, &mut z[..n]);
    let mut dy = vec![0.0; steps * d];
    let mut dw = vec![0.0; steps * w];
    let mut du = vec![0.0; steps * u];
    let mut dv = vec![0.0; steps * sub * v];

    let sqdt = dt.sqrt();
    let sqdelta = delta.sqrt();
    let mut b = vec![0.0; m];
    let mut sig = vec![0.0; m * w];
    let mut h = vec![0.0; d];
    let mut fast = FastStepper::new(mm);

    for k in 0..steps {
        let (head, tail) = x.split_at_mut((k + 1) * m);
        let xk = &head[k * m..];
        let xn = &mut tail[..m];
        let (zhead, ztail) = z.split_at_mut((k + 1) * n);
        let zk = &zhead[k * n..];
        let zn = &mut ztail[..n];

        mm.b.eval(xk, zk, &mut b)?;
        mm.sigma.eval(xk, zk, &mut sig)?;
        mm.h.eval(xk, zk, &mut h)?;
        let dwk = &mut dw[k * w..(k + 1) * w];
        for e in dwk.iter_mut() {
            *e = sqdt * w_rng.sample::<f64, _>(StandardNormal);
        }
        let duk = &mut du[k * u..(k + 1) * u];
        for e in duk.iter_mut() {
            *e = sqdt * u_rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..m {
            let mut acc = xk[i] + b[i] * dt;
            for j in 0..w {
                acc += sig[i * w + j] * dwk[j];
            }
            xn[i] = acc;
        }
        observation_increment(&mm.alpha, &mm.gamma, &h, dt, dwk, duk, &mut dy[k * d..(k + 1) * d]);

        zn.copy_from_slice(zk);
        for s in 0..sub {
            let dvs = &mut dv[(k * sub + s) * v..(k * sub + s + 1) * v];
            for e in dvs.iter_mut() {
                *e = sqdelta * v_rng.sample::<f64, _>(StandardNormal);
            }
            fast.step_with(mm, xk, zn, fast_dt, fast_scale, dvs)?;
        }
        if xn.iter().chain(zn.iter()).any(|v| !v.is_finite()) || dy[k * d..(k + 1) * d].iter().any(|v| !v.is_finite()) {
            return Err(Error::abort(
                k + 1,
                "non-finite state in joint simulation; try a smaller fast substep factor",
            ));
        }
    }

    Ok(PathBundle {
        dims,
        epsilon: eps,
        substeps: sub,
        x,
        z,
        obs: ObservationPath { grid: *grid, d, dy },
        dw,
        du,
        dv,
        stream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::{normalize_correlation, Field, Marginal, MultiscaleModel};
    use crate::simulate::rng::Purpose;

    fn base() -> MultiscaleModel {
        crate::model::tests::scalar_model(0.5, 0.8)
    }

    #[test]
    fn zero_dynamics_stays_put() {
        let mut m = base();
        let zero = Field::parse(1, 1, (1, 1), &["0"]).unwrap();
        m.b = zero.clone();
        m.sigma = zero.clone();
        m.f = zero.clone();
        m.g = zero.clone();
        m.h = zero;
        m.initial_law.x = vec![Marginal::Point(1.0)];
        m.initial_law.z = vec![Marginal::Point(2.0)];
        let nm = normalize_correlation(&m).unwrap();
        let grid = TimeGrid::new(1.0, 50, 0.1).unwrap();
        let p = simulate_joint(&nm, &grid, RngStream::new(0, Purpose::Path, 0)).unwrap();
        assert!(p.x.iter().all(|&v| v == 1.0));
        assert!(p.z.iter().all(|&v| v == 2.0));
        // gamma gamma^* > 0 keeps observation noise; the drift part of Y is zero.
        let a = nm.model().alpha[0];
        let g = nm.model().gamma[0];
        for k in 0..grid.steps {
            assert_eq!(p.obs.dy[k], a * p.dw[k] + g * p.du[k]);
        }
    }

    #[test]
    fn observation_reconstructs_bitwise() {
        let nm = normalize_correlation(&base()).unwrap();
        let grid = TimeGrid::new(1.0, 200, 0.1).unwrap();
        let p = simulate_joint(&nm, &grid, RngStream::new(5, Purpose::Path, 2)).unwrap();
        assert_eq!(p.reconstruction_mismatch(&nm).unwrap(), None);
        assert_eq!(&p.obs.cumulative()[..1], &[0.0]);
    }

    #[test]
    fn deterministic_for_same_stream() {
        let nm = normalize_correlation(&base()).unwrap();
        let grid = TimeGrid::new(1.0, 100, 0.1).unwrap();
        let a = simulate_joint(&nm, &grid, RngStream::new(5, Purpose::Path, 2)).unwrap();
        let b = simulate_joint(&nm, &grid, RngStream::new(5, Purpose::Path, 2)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.z, b.z);
        assert_eq!(a.obs, b.obs);
    }

    #[test]
    fn fast_ou_has_unit_stationary_variance() {
        let nm = normalize_correlation(&base().with_epsilon(0.1).unwrap()).unwrap();
        let grid = TimeGrid::new(1.0, 1000, 0.1).unwrap();
        let p = simulate_joint(&nm, &grid, RngStream::new(9, Purpose::Path, 0)).unwrap();
        let tail = &p.z[500..];
        let (mean, _) = linalg::mean_se(tail);
        let sq: Vec<f64> = tail.iter().map(|v| (v - mean) * (v - mean)).collect();
        // Correlation time eps^2 = 0.01 against spacing 0.001: batch means
        // absorb the autocorrelation.
        let var = sq.iter().sum::<f64>() / sq.len() as f64;
        let se = linalg::batch_means_se(&sq, 10);
        // Euler's stationary variance for fast step h is 1/(1 - h/2).
        let h = grid.dt / grid.substeps(0.1) as f64 / 0.01;
        let target = 1.0 / (1.0 - h / 2.0);
        assert!((var - target).abs() <= 3.0 * se, "var {var} se {se}");
    }

    #[test]
    fn deterministic_relaxation_of_fast_component() {
        let mut m = base().with_epsilon(0.1).unwrap();
        m.g = Field::parse(1, 1, (1, 1), &["0"]).unwrap();
        m.initial_law.z = vec![Marginal::Point(1.0)];
        let nm = normalize_correlation(&m).unwrap();
        let grid = TimeGrid::new(1.0, 100, 0.1).unwrap();
        let p = simulate_joint(&nm, &grid, RngStream::new(0, Purpose::Path, 0)).unwrap();
        // t = 0.01: ten substeps of fast step 0.1 each.
        let sub = grid.substeps(0.1);
        let h = grid.dt / sub as f64 / 0.01;
        let euler = (1.0 - h).powi(sub as i32);
        let exact = (-1.0f64).exp();
        assert!((p.z[1] - euler).abs() < 1e-14);
        // Global Euler error for y' = -y over unit time with step h is below h.
        assert!((p.z[1] - exact).abs() < h);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let nm = normalize_correlation(&base()).unwrap();
        let grid = TimeGrid::new(1.0, 4, 0.1).unwrap();
        let p = simulate_joint(&nm, &grid, RngStream::new(0, Purpose::Path, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.csv");
        p.write_csv(&f).unwrap();
        let text = std::fs::read_to_string(&f).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,z1,y1");
        assert_eq!(lines.len(), 6);
    }
}
