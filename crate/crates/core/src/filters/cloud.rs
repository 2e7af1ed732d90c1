//! Weighted particle clouds in the log domain.

use rand::Rng;
use smallvec::SmallVec;

use crate::linalg;
use crate::model::TestFunction;

pub type State = SmallVec<[f64; 4]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub x: State,
    /// Empty for reduced-filter particles.
    pub z: State,
    pub log_w: f64,
}

/// Weighted empirical measure. The unnormalized mass is
/// `rho(1) = exp(log_norm) * mean_i exp(log_w_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<Particle>,
    pub log_norm: f64,
}

/// Normalized weights `w_i / sum_j w_j` with the pieces needed to rebuild
/// unnormalized quantities.
#[derive(Debug, Clone)]
pub struct Weights {
    /// `exp(log_w_i - max)`.
    pub scaled: Vec<f64>,
    pub max_log: f64,
    /// Compensated sum of `scaled`.
    pub total: f64,
}

impl Weights {
    pub fn normalized(&self) -> Vec<f64> {
        self.scaled.iter().map(|w| w / self.total).collect()
    }

    /// `sum_i w_i f_i / sum_i w_i` with compensated sums. Constant `f == 1`
    /// gives exactly 1.
    pub fn expectation(&self, values: impl Iterator<Item = f64>) -> f64 {
        linalg::compensated_sum(self.scaled.iter().zip(values).map(|(w, v)| w * v)) / self.total
    }

    pub fn ess(&self) -> f64 {
        let n = self.scaled.len() as f64;
        let s2 = linalg::compensated_sum(self.scaled.iter().map(|w| w * w));
        (self.total * self.total / s2).clamp(1.0, n)
    }
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Weights {
        let max_log = self.particles.iter().map(|p| p.log_w).fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = self.particles.iter().map(|p| (p.log_w - max_log).exp()).collect();
        let total = linalg::compensated_sum(scaled.iter().cloned());
        Weights { scaled, max_log, total }
    }

    /// `log rho(1)`.
    pub fn log_mass(&self) -> f64 {
        let logs: Vec<f64> = self.particles.iter().map(|p| p.log_w).collect();
        self.log_norm + linalg::log_mean_exp(&logs)
    }

    pub fn ess(&self) -> f64 {
        self.weights().ess()
    }

    /// Normalized expectation of `f(x, z)`.
    pub fn expectation<F: Fn(&[f64], &[f64]) -> f64>(&self, f: F) -> f64 {
        let w = self.weights();
        w.expectation(self.particles.iter().map(|p| f(&p.x, &p.z)))
    }

    pub fn pi(&self, phi: &TestFunction) -> f64 {
        self.expectation(|x, _| phi.value(x))
    }

    /// Posterior mean of slow coordinate `j`.
    pub fn mean_x(&self, j: usize) -> f64 {
        self.expectation(|x, _| x[j])
    }

    /// Bootstrap standard error of the normalized expectation of `f`:
    /// particles are redrawn uniformly with replacement, keeping their
    /// weights.
    pub fn bootstrap_se<F: Fn(&[f64], &[f64]) -> f64, R: Rng + ?Sized>(&self, f: F, reps: usize, rng: &mut R) -> f64 {
        let n = self.len();
        let w = self.weights();
        let vals: Vec<f64> = self.particles.iter().map(|p| f(&p.x, &p.z)).collect();
        let mut est = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut sw = 0.0;
            let mut swv = 0.0;
            for _ in 0..n {
                let i = rng.random_range(0..n);
                sw += w.scaled[i];
                swv += w.scaled[i] * vals[i];
            }
            est.push(swv / sw);
        }
        let (_, se) = linalg::mean_se(&est);
        // mean_se divides by sqrt(reps); the bootstrap SE is the spread.
        se * (reps as f64).sqrt()
    }
}

/// Outcome of a resampling decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleOutcome {
    pub triggered: bool,
    pub ess_before: f64,
}

/// Systematic resampling, triggered iff `ESS < threshold * N`. The pre-step
/// mean weight moves into `log_norm`, so `rho(1)` is unchanged.
pub fn resample_systematic<R: Rng + ?Sized>(cloud: &mut ParticleCloud, threshold: f64, rng: &mut R) -> ResampleOutcome {
    assert!(threshold > 0.0 && threshold <= 1.0, "resampling threshold must lie in (0, 1]");
    let n = cloud.len();
    let w = cloud.weights();
    let ess = w.ess();
    if !(ess < threshold * n as f64) {
        return ResampleOutcome {
            triggered: false,
            ess_before: ess,
        };
    }
    let logs: Vec<f64> = cloud.particles.iter().map(|p| p.log_w).collect();
    let lme = linalg::log_mean_exp(&logs);

    let u0: f64 = rng.random::<f64>() / n as f64;
    let step = 1.0 / n as f64;
    let mut cum = 0.0;
    let mut j = 0usize;
    let norm = w.normalized();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u = u0 + i as f64 * step;
        while j + 1 < n && cum + norm[j] <= u {
            cum += norm[j];
            j += 1;
        }
        let src = &cloud.particles[j];
        out.push(Particle {
            x: src.x.clone(),
            z: src.z.clone(),
            log_w: 0.0,
        });
    }
    cloud.particles = out;
    cloud.log_norm += lme;
    ResampleOutcome {
        triggered: true,
        ess_before: ess,
    }
}
