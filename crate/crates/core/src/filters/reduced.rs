//! Reduced filter: slow-only particles driven by the homogenized
//! coefficients, `dX = bbar dt + L dW_hat + sigbar (alpha^* dY + Gamma dW_perp - alpha^* hbar dt)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::engine::{self, Coupling, FilterConfig, FilterRun, Kernel, Observer};
use crate::averaging::{HomogenizedModel, HomogenizedValues};
use crate::error::Result;
use crate::model::expr::EvalError;
use crate::simulate::{ObservationPath, Purpose, RngStream, StepWeight};

struct ReducedKernel<'a> {
    homog: &'a HomogenizedModel,
    dt: f64,
    sqdt: f64,
}

pub struct ReducedScratch {
    vals: HomogenizedValues,
    resid: Vec<f64>,
    xi_perp: Vec<f64>,
    xi_hat: Vec<f64>,
    dw: Vec<f64>,
}

impl Kernel for ReducedKernel<'_> {
    type Scratch = ReducedScratch;

    fn dims(&self) -> (usize, usize) {
        (self.homog.dims().m, 0)
    }

    fn purposes(&self, coupling: Coupling) -> [Purpose; 3] {
        match coupling {
            Coupling::Common => [Purpose::FilterInitial, Purpose::FilterSlow, Purpose::ReducedHat],
            Coupling::Independent => [Purpose::ReducedInitial, Purpose::ReducedSlow, Purpose::ReducedHat],
        }
    }

    fn scratch(&self) -> ReducedScratch {
        let d = self.homog.dims();
        ReducedScratch {
            vals: HomogenizedValues::zeros(d),
            resid: vec![0.0; d.d],
            xi_perp: vec![0.0; d.w],
            xi_hat: vec![0.0; d.m],
            dw: vec![0.0; d.w],
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng, x: &mut [f64], _z: &mut [f64]) {
        for (o, m) in x.iter_mut().zip(self.homog.initial_x()) {
            *o = m.sample(rng);
        }
    }

    #[inline]
    fn advance(
        &self,
        x: &mut [f64],
        _z: &mut [f64],
        dy: &[f64],
        slow: &mut ChaCha8Rng,
        aux: &mut ChaCha8Rng,
        s: &mut ReducedScratch,
    ) -> Result<StepWeight, EvalError> {
        let dims = self.homog.dims();
        let (m, w, d) = (dims.m, dims.w, dims.d);
        self.homog.eval(x, &mut s.vals)?;
        let mut inner = 0.0;
        let mut h2 = 0.0;
        for i in 0..d {
            let h = s.vals.hbar[i];
            inner += h * dy[i];
            h2 += h * h;
            s.resid[i] = dy[i] - h * self.dt;
        }
        for e in s.xi_perp.iter_mut() {
            *e = self.sqdt * slow.sample::<f64, _>(StandardNormal);
        }
        for e in s.xi_hat.iter_mut() {
            *e = self.sqdt * aux.sample::<f64, _>(StandardNormal);
        }
        let at = self.homog.alpha_t();
        let gp = self.homog.gamma_perp();
        for j in 0..w {
            let mut acc = 0.0;
            for i in 0..d {
                acc += at[j * d + i] * s.resid[i];
            }
            for l in 0..w {
                acc += gp[j * w + l] * s.xi_perp[l];
            }
            s.dw[j] = acc;
        }
        for i in 0..m {
            let mut acc = s.vals.bbar[i] * self.dt;
            for j in 0..m {
                acc += s.vals.l[i * m + j] * s.xi_hat[j];
            }
            for j in 0..w {
                acc += s.vals.sigbar[i * w + j] * s.dw[j];
            }
            x[i] += acc;
        }
        Ok(StepWeight {
            log_increment: inner - 0.5 * h2 * self.dt,
            h_norm: h2.sqrt(),
        })
    }
}

/// Weighted particle approximation of the homogenized filter on one
/// observation path.
pub fn run_reduced_filter(
    homog: &HomogenizedModel,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    stream: RngStream,
) -> Result<FilterRun> {
    run_reduced_filter_observed(homog, obs, cfg, stream, None)
}

pub fn run_reduced_filter_observed(
    homog: &HomogenizedModel,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    stream: RngStream,
    observer: Option<&mut Observer<'_>>,
) -> Result<FilterRun> {
    if obs.d != homog.dims().d {
        return Err(crate::Error::Config("observation dimension does not match the model".into()));
    }
    let kernel = ReducedKernel {
        homog,
        dt: obs.grid.dt,
        sqdt: obs.grid.dt.sqrt(),
    };
    engine::run(&kernel, obs, cfg, stream, observer)
}
