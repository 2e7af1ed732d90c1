//! Euler-Maruyama stepping of the fast component, shared by the joint
//! simulator, the full filter and the invariant-measure sampler.

use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::RngStream;
use crate::error::{Error, Result};
use crate::model::expr::EvalError;
use crate::model::{MultiscaleModel, NormalizedModel};

/// Scratch buffers for one fast-variable Euler step.
#[derive(Debug, Clone)]
pub struct FastStepper {
    f: Vec<f64>,
    g: Vec<f64>,
    dv: Vec<f64>,
}

impl FastStepper {
    pub fn new(model: &MultiscaleModel) -> Self {
        let d = model.dims;
        FastStepper {
            f: vec![0.0; d.n],
            g: vec![0.0; d.n * d.v],
            dv: vec![0.0; d.v],
        }
    }

    /// `z <- z + f(x,z) drift_dt + g(x,z) dv` with the given increment.
    #[inline]
    pub fn step_with(
        &mut self,
        model: &MultiscaleModel,
        x: &[f64],
        z: &mut [f64],
        drift_dt: f64,
        noise_scale: f64,
        dv: &[f64],
    ) -> Result<(), EvalError> {
        model.f.eval(x, z, &mut self.f)?;
        model.g.eval(x, z, &mut self.g)?;
        let v = dv.len();
        for (i, zi) in z.iter_mut().enumerate() {
            let mut acc = self.f[i] * drift_dt;
            for (j, dvj) in dv.iter().enumerate() {
                acc += self.g[i * v + j] * noise_scale * dvj;
            }
            *zi += acc;
        }
        Ok(())
    }

    /// One step with fresh noise of standard deviation `noise_sd` per
    /// coordinate.
    #[inline]
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &MultiscaleModel,
        x: &[f64],
        z: &mut [f64],
        drift_dt: f64,
        noise_sd: f64,
        rng: &mut R,
    ) -> Result<(), EvalError> {
        let mut dv = std::mem::take(&mut self.dv);
        for e in dv.iter_mut() {
            *e = noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let out = self.step_with(model, x, z, drift_dt, 1.0, &dv);
        self.dv = dv;
        out
    }
}

/// Path of the frozen-`x` fast process `dZ = f(x,Z) dt + g(x,Z) dV` on its own
/// O(1) timescale, `steps + 1` rows of `n` values.
pub fn simulate_frozen_fast(
    model: &NormalizedModel,
    x: &[f64],
    z0: &[f64],
    steps: usize,
    dt: f64,
    stream: RngStream,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("fast step must be positive, got {dt}")));
    }
    let mm = model.model();
    let n = mm.dims.n;
    let mut rng = stream.rng();
    let mut stepper = FastStepper::new(mm);
    let mut z = z0.to_vec();
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend_from_slice(&z);
    let sd = dt.sqrt();
    for k in 0..steps {
        stepper.step(mm, x, &mut z, dt, sd, &mut rng)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::abort(k + 1, "frozen fast path diverged; the recurrence condition may fail"));
        }
        out.extend_from_slice(&z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::{normalize_correlation, Field};
    use crate::simulate::rng::Purpose;

    fn model(f: &str, g: &str) -> NormalizedModel {
        let mut m = crate::model::tests::scalar_model(0.0, 1.0);
        m.f = Field::parse(1, 1, (1, 1), &[f]).unwrap();
        m.g = Field::parse(1, 1, (1, 1), &[g]).unwrap();
        normalize_correlation(&m).unwrap()
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let nm = model("0", "0");
        let p = simulate_frozen_fast(&nm, &[0.3], &[1.5], 100, 0.01, RngStream::new(0, Purpose::Test, 0)).unwrap();
        assert!(p.iter().all(|&v| v == 1.5));
    }

    fn long_run_mean(f: &str, x: f64) -> (f64, f64) {
        let nm = model(f, "sqrt(2)");
        let p = simulate_frozen_fast(&nm, &[x], &[0.0], 400_000, 0.01, RngStream::new(1, Purpose::Test, 1)).unwrap();
        let tail = &p[1000..];
        (tail.iter().sum::<f64>() / tail.len() as f64, linalg::batch_means_se(tail, 40))
    }

    #[test]
    fn ou_long_run_mean_is_zero() {
        let (mean, se) = long_run_mean("-z1", 0.0);
        assert!(mean.abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn ou_reverts_to_frozen_slow_state() {
        let (mean, se) = long_run_mean("-z1 + x1", 0.5);
        assert!((mean - 0.5).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let nm = model("z1*z1*z1", "0");
        let err = simulate_frozen_fast(&nm, &[0.0], &[2.0], 1000, 0.5, RngStream::new(0, Purpose::Test, 0)).unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { .. } | Error::Eval(_)));
    }
}
