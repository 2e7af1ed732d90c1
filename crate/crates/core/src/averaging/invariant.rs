//! Long-run trajectory sampling of the frozen-`x` fast process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::NormalizedModel;
use crate::simulate::{FastStepper, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSamplerConfig {
    pub burn_in: usize,
    pub thinning: usize,
    pub retained: usize,
    pub dt: f64,
    /// Starting point; the origin when absent.
    #[serde(default)]
    pub initial_z: Option<Vec<f64>>,
}

impl InvariantSamplerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.thinning == 0 || self.retained == 0 {
            return Err(Error::Config("invariant sampler needs thinning >= 1 and retained >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("invariant sampler step must be positive, got {}", self.dt)));
        }
        if let Some(z) = &self.initial_z {
            if z.len() != n {
                return Err(Error::Config(format!("initial_z has {} entries, expected {n}", z.len())));
            }
        }
        Ok(())
    }
}

/// Retained samples of `mu_infinity(x)`, row-major `retained x n`.
#[derive(Debug, Clone)]
pub struct InvariantSamples {
    pub x: Vec<f64>,
    pub n: usize,
    pub samples: Vec<f64>,
    /// Batch-means standard error of the mean of `z_1`.
    pub probe_se: f64,
}

impl InvariantSamples {
    pub fn len(&self) -> usize {
        self.samples.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.n..(i + 1) * self.n]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + Clone {
        self.samples.chunks_exact(self.n)
    }

    /// Mean and batch-means standard error of coordinate `j`.
    pub fn coordinate_mean(&self, j: usize) -> (f64, f64) {
        let col: Vec<f64> = self.iter().map(|z| z[j]).collect();
        (linalg::shifted_mean(col.iter().cloned()), linalg::batch_means_se(&col, 20))
    }
}

/// Runs the frozen fast process past the burn-in and keeps every
/// `thinning`-th state.
pub fn estimate_invariant_measure(
    model: &NormalizedModel,
    x: &[f64],
    cfg: &InvariantSamplerConfig,
    stream: RngStream,
) -> Result<InvariantSamples> {
    let mm = model.model();
    let n = mm.dims.n;
    cfg.validate(n)?;
    let mut rng = stream.rng();
    let mut stepper = FastStepper::new(mm);
    let mut z = cfg.initial_z.clone().unwrap_or_else(|| vec![0.0; n]);
    let sd = cfg.dt.sqrt();
    let mut samples = Vec::with_capacity(cfg.retained * n);
    let total = cfg.burn_in + cfg.retained * cfg.thinning;
    for k in 0..total {
        stepper.step(mm, x, &mut z, cfg.dt, sd, &mut rng)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::abort(
                k + 1,
                "invariant sampler diverged; the recurrence condition is likely violated",
            ));
        }
        if k >= cfg.burn_in && (k + 1 - cfg.burn_in) % cfg.thinning == 0 {
            samples.extend_from_slice(&z);
        }
    }
    let probe: Vec<f64> = samples.iter().step_by(n).cloned().collect();
    Ok(InvariantSamples {
        x: x.to_vec(),
        n,
        probe_se: linalg::batch_means_se(&probe, 20),
        samples,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{normalize_correlation, Field};
    use crate::simulate::Purpose;

    pub(crate) fn ou_cfg(retained: usize) -> InvariantSamplerConfig {
        InvariantSamplerConfig {
            burn_in: 2000,
            thinning: 20,
            retained,
            dt: 0.01,
            initial_z: None,
        }
    }

    fn model_with(f: &str) -> NormalizedModel {
        let mut m = crate::model::tests::scalar_model(0.0, 1.0);
        m.f = Field::parse(1, 1, (1, 1), &[f]).unwrap();
        normalize_correlation(&m).unwrap()
    }

    #[test]
    fn ou_invariant_law_is_standard_normal() {
        let nm = model_with("-z1");
        let s = estimate_invariant_measure(&nm, &[0.0], &ou_cfg(50_000), RngStream::new(2, Purpose::Invariant, 0)).unwrap();
        let (mean, se) = s.coordinate_mean(0);
        assert!(mean.abs() <= 3.0 * se, "mean {mean} se {se}");
        let sq: Vec<f64> = s.iter().map(|z| (z[0] - mean).powi(2)).collect();
        let var = linalg::shifted_mean(sq.iter().cloned());
        let var_se = linalg::batch_means_se(&sq, 20);
        // Euler with step h has stationary variance 1 / (1 - h/2).
        let target = 1.0 / (1.0 - 0.005);
        assert!((var - target).abs() <= 3.0 * var_se, "var {var} se {var_se}");
    }

    #[test]
    fn shifted_ou_mean_follows_slow_state() {
        let nm = model_with("-(z1 - x1)");
        let s = estimate_invariant_measure(&nm, &[1.0], &ou_cfg(50_000), RngStream::new(2, Purpose::Invariant, 1)).unwrap();
        let (mean, se) = s.coordinate_mean(0);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn two_dimensional_product_law_is_uncorrelated() {
        let text = r#"{
          "dims": {"m": 1, "n": 2, "d": 1, "w": 1, "v": 2, "u": 1},
          "epsilon": 0.25,
          "b": ["-x1"], "sigma": [["1"]],
          "f": ["-z1", "-z2"], "g": [["sqrt(2)", "0"], ["0", "sqrt(2)"]],
          "h": ["tanh(x1)"], "alpha": [[0.0]], "gamma": [[1.0]],
          "initial_law": {"x": [{"point": 0.0}], "z": [{"point": 0.0}, {"point": 0.0}]}
        }"#;
        let m = crate::model::MultiscaleModel::from_json_str(text).unwrap();
        let nm = normalize_correlation(&m).unwrap();
        let s = estimate_invariant_measure(&nm, &[0.0], &ou_cfg(50_000), RngStream::new(4, Purpose::Invariant, 0)).unwrap();
        let prod: Vec<f64> = s.iter().map(|z| z[0] * z[1]).collect();
        let c = linalg::shifted_mean(prod.iter().cloned());
        let se = linalg::batch_means_se(&prod, 20);
        assert!(c.abs() <= 3.0 * se, "cov {c} se {se}");
    }

    #[test]
    fn more_samples_shrink_standard_error() {
        let nm = model_with("-z1");
        let small = estimate_invariant_measure(&nm, &[0.0], &ou_cfg(20_000), RngStream::new(6, Purpose::Invariant, 0)).unwrap();
        let large = estimate_invariant_measure(&nm, &[0.0], &ou_cfg(80_000), RngStream::new(6, Purpose::Invariant, 1)).unwrap();
        let ratio = small.probe_se / large.probe_se;
        assert!((1.5..=2.7).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn divergent_fast_drift_aborts() {
        let nm = model_with("z1");
        let cfg = InvariantSamplerConfig {
            dt: 0.5,
            burn_in: 10_000,
            ..ou_cfg(10)
        };
        assert!(estimate_invariant_measure(&nm, &[0.0], &cfg, RngStream::new(0, Purpose::Invariant, 0)).is_err());
    }
}
