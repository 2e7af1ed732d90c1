//! Kalman-Bucy filter for linear-Gaussian models whose observation noise is
//! correlated with the signal noise. Used as an independent reference for the
//! particle filters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::NormalizedModel;
use crate::simulate::ObservationPath;

/// `dX = (A x + a0) dt + Sigma dW`, `dY = (H x + h0) dt + alpha dW + gamma dU`
/// with standard observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpec {
    pub a: DMatrix<f64>,
    pub a0: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h0: DVector<f64>,
    /// `d x w`.
    pub alpha: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub cov0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LinearSpec {
    /// Extracts the linear structure of a normalized model. Fails unless
    /// `b` and `h` are constant or linear builtins without `z` dependence
    /// and `sigma` is a constant.
    pub fn from_model(model: &NormalizedModel) -> Result<Self> {
        let mm = model.model();
        let dims = mm.dims;
        let (m, d, w) = (dims.m, dims.d, dims.w);
        let nonlinear = |name: &str| Error::Model(format!("`{name}` is not affine in x; the Kalman oracle needs a linear model"));
        let (ax, bz, c) = mm.b.affine_parts().ok_or_else(|| nonlinear("b"))?;
        if bz.iter().any(|&v| v != 0.0) {
            return Err(nonlinear("b"));
        }
        let (hx, hz, hc) = mm.h.affine_parts().ok_or_else(|| nonlinear("h"))?;
        if hz.iter().any(|&v| v != 0.0) {
            return Err(nonlinear("h"));
        }
        let (sx, sz, sc) = mm.sigma.affine_parts().ok_or_else(|| nonlinear("sigma"))?;
        if sx.iter().chain(&sz).any(|&v| v != 0.0) {
            return Err(Error::Model("`sigma` must be constant for the Kalman oracle".into()));
        }
        let law = &mm.initial_law.x;
        Ok(LinearSpec {
            a: DMatrix::from_row_slice(m, m, &ax),
            a0: DVector::from_column_slice(&c),
            sigma: DMatrix::from_row_slice(m, w, &sc),
            h: DMatrix::from_row_slice(d, m, &hx),
            h0: DVector::from_column_slice(&hc),
            alpha: DMatrix::from_row_slice(d, w, &mm.alpha),
            mean0: DVector::from_iterator(m, law.iter().map(|l| l.mean())),
            cov0: DMatrix::from_diagonal(&DVector::from_iterator(m, law.iter().map(|l| l.variance()))),
        })
    }

    /// Time derivative of `(mean, cov)` for a constant observation rate `ydot`.
    fn rhs(&self, mean: &DVector<f64>, cov: &DMatrix<f64>, ydot: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let gain = cov * self.h.transpose() + &self.sigma * self.alpha.transpose();
        let innov = ydot - &self.h * mean - &self.h0;
        let dm = &self.a * mean + &self.a0 + &gain * innov;
        let dp = &self.a * cov + cov * self.a.transpose() + &self.sigma * self.sigma.transpose() - &gain * gain.transpose();
        (dm, dp)
    }
}

/// Conditional mean and covariance at every grid time, integrating the
/// Kalman-Bucy equations with RK4 and the observation rate held at
/// `dY_k / dt` on each step.
pub fn kalman_bucy_oracle(spec: &LinearSpec, obs: &ObservationPath) -> Result<Vec<KalmanState>> {
    let m = spec.a.nrows();
    if spec.h.nrows() != obs.d || spec.h.ncols() != m {
        return Err(Error::Config("linear spec does not match the observation dimension".into()));
    }
    let grid = obs.grid;
    let dt = grid.dt;
    let mut mean = spec.mean0.clone();
    let mut cov = spec.cov0.clone();
    let mut out = Vec::with_capacity(grid.steps + 1);
    out.push(KalmanState {
        t: 0.0,
        mean: mean.clone(),
        cov: cov.clone(),
    });
    for k in 0..grid.steps {
        let ydot = DVector::from_column_slice(obs.increment(k)) / dt;
        let (m1, p1) = spec.rhs(&mean, &cov, &ydot);
        let (m2, p2) = spec.rhs(&(&mean + &m1 * (dt / 2.0)), &(&cov + &p1 * (dt / 2.0)), &ydot);
        let (m3, p3) = spec.rhs(&(&mean + &m2 * (dt / 2.0)), &(&cov + &p2 * (dt / 2.0)), &ydot);
        let (m4, p4) = spec.rhs(&(&mean + &m3 * dt), &(&cov + &p3 * dt), &ydot);
        mean += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (dt / 6.0);
        cov += (p1 + p2 * 2.0 + p3 * 2.0 + p4) * (dt / 6.0);
        cov = (&cov + cov.transpose()) * 0.5;
        out.push(KalmanState {
            t: grid.time(k + 1),
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::TimeGrid;

    fn scalar(a: f64, s: f64, h: f64, alpha: f64, p0: f64) -> LinearSpec {
        LinearSpec {
            a: DMatrix::from_element(1, 1, a),
            a0: DVector::zeros(1),
            sigma: DMatrix::from_element(1, 1, s),
            h: DMatrix::from_element(1, 1, h),
            h0: DVector::zeros(1),
            alpha: DMatrix::from_element(1, 1, alpha),
            mean0: DVector::from_element(1, 1.0),
            cov0: DMatrix::from_element(1, 1, p0),
        }
    }

    fn flat_path(horizon: f64, steps: usize) -> ObservationPath {
        ObservationPath {
            grid: TimeGrid::new(horizon, steps, 0.1).unwrap(),
            d: 1,
            dy: vec![0.0; steps],
        }
    }

    #[test]
    fn no_observation_gives_prior_moments() {
        let (a, s, p0) = (-1.0, 1.0, 0.3);
        let traj = kalman_bucy_oracle(&scalar(a, s, 0.0, 0.0, p0), &flat_path(2.0, 400)).unwrap();
        for st in traj.iter().step_by(50) {
            let e = (a * st.t).exp();
            let p = p0 * e * e + s * s * (e * e - 1.0) / (2.0 * a);
            assert!((st.mean[0] - e).abs() < 1e-9, "{} vs {e}", st.mean[0]);
            assert!((st.cov[(0, 0)] - p).abs() < 1e-9);
        }
    }

    #[test]
    fn riccati_reaches_textbook_fixed_point() {
        let (a, s, h) = (-1.0f64, 1.0, 1.0);
        let p_inf = (a + (a * a + s * s * h * h).sqrt()) / (h * h);
        let traj = kalman_bucy_oracle(&scalar(a, s, h, 0.0, 0.0), &flat_path(20.0, 4000)).unwrap();
        let p = traj.last().unwrap().cov[(0, 0)];
        assert!((p - p_inf).abs() < 1e-10, "{p} vs {p_inf}");
    }

    #[test]
    fn correlated_stationary_start_stays_put() {
        let (a, s, h, al) = (-1.0f64, 1.0, 1.0, 0.5);
        // Root of 2 a P + s^2 - (P h + s al)^2 = 0.
        let c = s * al;
        let (qa, qb, qc) = (h * h, 2.0 * h * c - 2.0 * a, c * c - s * s);
        let p_inf = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
        let traj = kalman_bucy_oracle(&scalar(a, s, h, al, p_inf), &flat_path(5.0, 1000)).unwrap();
        for st in &traj {
            assert!((st.cov[(0, 0)] - p_inf).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let spec = LinearSpec {
            a: DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, -0.2, -0.5]),
            a0: DVector::from_column_slice(&[0.1, 0.0]),
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.7]),
            h: DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            h0: DVector::zeros(1),
            alpha: DMatrix::from_row_slice(1, 2, &[0.4, 0.2]),
            mean0: DVector::zeros(2),
            cov0: DMatrix::identity(2, 2),
        };
        let mut obs = flat_path(3.0, 600);
        for (k, v) in obs.dy.iter_mut().enumerate() {
            *v = 0.05 * ((k as f64) * 0.37).sin();
        }
        for st in kalman_bucy_oracle(&spec, &obs).unwrap() {
            assert_eq!(st.cov[(0, 1)], st.cov[(1, 0)]);
            assert!(st.cov.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn nonlinear_model_is_rejected() {
        let nm = crate::model::normalize_correlation(&crate::model::tests::scalar_model(0.5, 1.0)).unwrap();
        assert!(LinearSpec::from_model(&nm).is_err());
    }
}
