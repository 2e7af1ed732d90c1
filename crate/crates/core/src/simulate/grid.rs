use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ratio between the fast substep and `epsilon^2`.
pub const DEFAULT_FAST_FACTOR: f64 = 0.1;

/// Uniform coarse grid on `[0, T]`. The step count is fixed first and the
/// step derived from it, so `steps * dt` reproduces the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
    pub dt: f64,
    pub fast_factor: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize, fast_factor: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Config("step count must be positive".into()));
        }
        if !(fast_factor > 0.0 && fast_factor.is_finite()) {
            return Err(Error::Config(format!("fast substep factor must be positive, got {fast_factor}")));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            dt: horizon / steps as f64,
            fast_factor,
        })
    }

    /// Grid with the step count nearest to `horizon / dt`.
    pub fn with_step(horizon: f64, dt: f64, fast_factor: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self::new(horizon, steps, fast_factor)
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self::new(self.horizon, self.steps * factor, self.fast_factor).expect("refining a valid grid")
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// Number of fast substeps per coarse step at scale `epsilon`.
    pub fn substeps(&self, epsilon: f64) -> usize {
        let ratio = self.dt / (self.fast_factor * epsilon * epsilon);
        // Guard against ratios that are integers up to rounding.
        ((ratio * (1.0 - 1e-12)).ceil() as usize).max(1)
    }

    /// Step index nearest to time `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn substep_count_examples() {
        let g = TimeGrid::new(1.0, 640, 0.1).unwrap();
        assert_eq!(g.substeps(0.125), 1);
        assert_eq!(g.substeps(0.05), 7);
        let g = TimeGrid::new(1.0, 100, 0.1).unwrap();
        assert_eq!(g.substeps(0.1), 10);
    }

    proptest! {
        #[test]
        fn fast_substep_respects_bound(steps in 1usize..5000, eps in 0.01f64..0.99, cf in 0.01f64..1.0) {
            let g = TimeGrid::new(1.0, steps, cf).unwrap();
            let m = g.substeps(eps);
            prop_assert!(g.dt / m as f64 <= cf * eps * eps * (1.0 + 1e-9));
            prop_assert!(m == 1 || g.dt / (m - 1) as f64 > cf * eps * eps * (1.0 - 1e-9));
        }
    }

    #[test]
    fn final_time_is_horizon() {
        let g = TimeGrid::new(0.7, 3, 0.1).unwrap();
        assert_eq!(g.time(3), 0.7);
        assert_eq!(g.time(0), 0.0);
        assert!(TimeGrid::new(1.0, 0, 0.1).is_err());
    }
}
