//! Time stepping shared by the full and reduced particle filters.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cloud::{resample_systematic, Particle, ParticleCloud, State};
use crate::error::{Error, Result};
use crate::model::expr::EvalError;
use crate::model::TestFunction;
use crate::simulate::{ObservationPath, Purpose, RngStream, StepWeight};

/// How the reduced filter's noise relates to the full filter's when both run
/// on the same observation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Particle `i` of both filters shares its initial slow state and the
    /// slow noise orthogonal to the observation.
    #[default]
    Common,
    /// Only the observation path is shared.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub particles: usize,
    /// Resampling threshold `tau`; `None` disables resampling.
    pub resampling: Option<f64>,
    /// Step indices at which estimates are recorded.
    pub checkpoints: Vec<usize>,
    pub test_functions: Vec<TestFunction>,
    pub coupling: Coupling,
}

impl FilterConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("a particle filter needs at least 2 particles".into()));
        }
        if let Some(t) = self.resampling {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("resampling threshold {t} outside (0, 1]")));
            }
        }
        if self.checkpoints.iter().any(|&k| k > steps) {
            return Err(Error::Config("checkpoint beyond the end of the observation path".into()));
        }
        Ok(())
    }
}

/// Filter output at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEstimate {
    pub step: usize,
    pub t: f64,
    /// Normalized `pi(phi_k)`.
    pub pi: Vec<f64>,
    /// Unnormalized `rho(phi_k) = rho(1) pi(phi_k)`.
    pub rho: Vec<f64>,
    pub rho1: f64,
    pub log_rho1: f64,
    pub ess: f64,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimates: Vec<FilterEstimate>,
    pub cloud: ParticleCloud,
    pub resamples: usize,
    /// ESS at every synchronization point, before any resampling there.
    pub ess_trace: Vec<f64>,
    pub max_abs_log_weight: f64,
    /// Girsanov bound `|h|_inf sum_k |dY_k| + |h|_inf^2 T / 2` over the run.
    pub weight_bound: f64,
}

impl FilterRun {
    pub fn final_estimate(&self) -> Option<&FilterEstimate> {
        self.estimates.last()
    }

    /// Trace CSV `t,ess,rho1,pi_phi_1..pi_phi_K`.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let k = self.estimates.first().map_or(0, |e| e.pi.len());
        let mut s = String::from("t,ess,rho1");
        for i in 1..=k {
            let _ = write!(s, ",pi_phi_{i}");
        }
        s.push('\n');
        for e in &self.estimates {
            let _ = write!(s, "{:.16e},{:.16e},{:.16e}", e.t, e.ess, e.rho1);
            for v in &e.pi {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// One particle system: how to draw a particle and advance it one step.
pub(crate) trait Kernel: Sync {
    type Scratch: Send;

    /// Slow and stored fast dimensions.
    fn dims(&self) -> (usize, usize);

    /// Stream purposes for the initial draw, the slow noise and the
    /// auxiliary noise.
    fn purposes(&self, coupling: Coupling) -> [Purpose; 3];

    fn scratch(&self) -> Self::Scratch;

    fn init(&self, rng: &mut ChaCha8Rng, x: &mut [f64], z: &mut [f64]);

    fn advance(
        &self,
        x: &mut [f64],
        z: &mut [f64],
        dy: &[f64],
        slow: &mut ChaCha8Rng,
        aux: &mut ChaCha8Rng,
        scratch: &mut Self::Scratch,
    ) -> Result<StepWeight, EvalError>;
}

struct Driver {
    slow: ChaCha8Rng,
    aux: ChaCha8Rng,
    h_max: f64,
}

/// Callback invoked at each checkpoint with the step index and the cloud.
pub type Observer<'a> = dyn FnMut(usize, &ParticleCloud) -> Result<()> + 'a;

fn estimate(cloud: &ParticleCloud, step: usize, t: f64, phis: &[TestFunction]) -> FilterEstimate {
    let w = cloud.weights();
    let logs: Vec<f64> = cloud.particles.iter().map(|p| p.log_w).collect();
    let log_rho1 = cloud.log_norm + crate::linalg::log_mean_exp(&logs);
    let rho1 = log_rho1.exp();
    let pi: Vec<f64> = phis
        .iter()
        .map(|phi| w.expectation(cloud.particles.iter().map(|p| phi.value(&p.x))))
        .collect();
    FilterEstimate {
        step,
        t,
        rho: pi.iter().map(|p| p * rho1).collect(),
        pi,
        rho1,
        log_rho1,
        ess: w.ess(),
    }
}

pub(crate) fn run<K: Kernel>(
    kernel: &K,
    obs: &ObservationPath,
    cfg: &FilterConfig,
    stream: RngStream,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<FilterRun> {
    let grid = obs.grid;
    cfg.validate(grid.steps)?;
    let n_part = cfg.particles;
    let (m, n) = kernel.dims();
    let [p_init, p_slow, p_aux] = kernel.purposes(cfg.coupling);

    let mut particles = Vec::with_capacity(n_part);
    let mut drivers = Vec::with_capacity(n_part);
    for i in 0..n_part as u64 {
        let mut init = stream.with_purpose(p_init).child(i).rng();
        let mut x: State = smallvec::smallvec![0.0; m];
        let mut z: State = smallvec::smallvec![0.0; n];
        kernel.init(&mut init, &mut x, &mut z);
        particles.push(Particle { x, z, log_w: 0.0 });
        drivers.push(Driver {
            slow: stream.with_purpose(p_slow).child(i).rng(),
            aux: stream.with_purpose(p_aux).child(i).rng(),
            h_max: 0.0,
        });
    }
    let mut cloud = ParticleCloud {
        particles,
        log_norm: 0.0,
    };

    let mut sync: Vec<usize> = cfg.checkpoints.clone();
    if cfg.resampling.is_some() {
        sync.extend(1..=grid.steps);
    }
    sync.push(grid.steps);
    sync.sort_unstable();
    sync.dedup();

    let mut estimates = Vec::with_capacity(cfg.checkpoints.len());
    let mut ess_trace = Vec::new();
    let mut resamples = 0usize;
    let mut variation = 0.0;
    let mut last = 0usize;
    let mut max_abs_log_weight = 0.0f64;
    let mut weight_bound = 0.0f64;

    for &k in &sync {
        if k > last {
            let failures: Vec<Option<(usize, String)>> = cloud
                .particles
                .par_iter_mut()
                .zip(drivers.par_iter_mut())
                .with_min_len(64)
                .map_init(
                    || kernel.scratch(),
                    |scratch, (p, drv)| {
                        for step in last..k {
                            let sw = match kernel.advance(&mut p.x, &mut p.z, obs.increment(step), &mut drv.slow, &mut drv.aux, scratch) {
                                Ok(sw) => sw,
                                Err(e) => return Some((step + 1, e.to_string())),
                            };
                            p.log_w += sw.log_increment;
                            drv.h_max = drv.h_max.max(sw.h_norm);
                            if !p.log_w.is_finite() || p.x.iter().chain(p.z.iter()).any(|v| !v.is_finite()) {
                                return Some((step + 1, "non-finite particle state or weight".into()));
                            }
                        }
                        None
                    },
                )
                .collect();
            if let Some((i, (step, reason))) = failures.into_iter().enumerate().find_map(|(i, f)| f.map(|f| (i, f))) {
                return Err(Error::NumericalAbort {
                    step,
                    particle: Some(i),
                    reason,
                });
            }
            for step in last..k {
                variation += obs.increment(step).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            last = k;

            // Girsanov sanity: |log w| <= |h|_inf sum |dY| + |h|_inf^2 t / 2.
            let h_sup = drivers.iter().map(|d| d.h_max).fold(0.0, f64::max);
            let bound = h_sup * variation + 0.5 * h_sup * h_sup * grid.time(k);
            let worst = cloud.particles.iter().map(|p| p.log_w.abs()).fold(0.0, f64::max);
            max_abs_log_weight = max_abs_log_weight.max(worst);
            weight_bound = bound;
            if worst > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Check(format!(
                    "log-weight {worst:.6e} exceeds the Girsanov bound {bound:.6e} at step {k}"
                )));
            }
        }

        let t = grid.time(k);
        if cfg.checkpoints.contains(&k) {
            estimates.push(estimate(&cloud, k, t, &cfg.test_functions));
            if let Some(obs_fn) = observer.as_deref_mut() {
                obs_fn(k, &cloud)?;
            }
        }
        if k > 0 {
            if let Some(tau) = cfg.resampling {
                if k < grid.steps {
                    let mut rng = stream.with_purpose(Purpose::Resample).child(k as u64).rng();
                    let out = resample_systematic(&mut cloud, tau, &mut rng);
                    ess_trace.push(out.ess_before);
                    if out.triggered {
                        resamples += 1;
                    }
                    continue;
                }
            }
            ess_trace.push(cloud.ess());
        }
    }

    Ok(FilterRun {
        estimates,
        cloud,
        resamples,
        ess_trace,
        max_abs_log_weight,
        weight_bound,
    })
}
