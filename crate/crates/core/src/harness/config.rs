//! Experiment configuration read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::averaging::{homogenize, HomogenizationSpec, HomogenizedModel};
use crate::dual::{Axis, CorrectorConfig, FullDualOptions};
use crate::error::{Error, Result};
use crate::filters::Coupling;
use crate::model::{normalize_correlation, MultiscaleModel, NormalizedModel, TestFunction, METRIC_FAMILY_SIZE};
use crate::simulate::{TimeGrid, DEFAULT_FAST_FACTOR};

/// What the study is expected to show. Drives the acceptance gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// No gates.
    #[default]
    None,
    /// Slope of the error and of the metric within `slope_band`, error
    /// strictly decreasing with epsilon, bias budget satisfied.
    Rate,
    /// The error does not depend on epsilon beyond Monte Carlo noise.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, relative to the configuration file.
    pub model: PathBuf,
    /// Strictly decreasing values in `(0, 1)`.
    pub epsilons: Vec<f64>,
    pub replications: usize,
    pub particles: usize,
    pub horizon: f64,
    /// Coarse steps on `[0, horizon]`.
    pub steps: usize,
    #[serde(default = "default_fast_factor")]
    pub fast_factor: f64,
    /// Number of family members whose paired error is reported.
    pub test_functions: usize,
    /// Moment `p` of the paired error.
    #[serde(default = "default_moment")]
    pub moment: u32,
    /// Extra times at which the paired error is recorded.
    #[serde(default)]
    pub probe_times: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// ESS threshold as a fraction of the particle count; `null` disables
    /// resampling.
    #[serde(default = "default_resampling")]
    pub resampling: Option<f64>,
    #[serde(default)]
    pub coupling: Coupling,
    /// Required unless the slow coefficients are free of `z`.
    #[serde(default)]
    pub homogenization: Option<HomogenizationSpec>,
    /// Refinement run at the largest epsilon.
    #[serde(default = "yes")]
    pub bias_budget: bool,
    #[serde(default)]
    pub expect: Expectation,
    #[serde(default = "default_band")]
    pub slope_band: [f64; 2],
    #[serde(default)]
    pub dual_check: Option<DualCheckConfig>,
    #[serde(default)]
    pub corrector_check: Option<CorrectorCheckConfig>,
}

fn default_fast_factor() -> f64 {
    DEFAULT_FAST_FACTOR
}

fn default_moment() -> u32 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_resampling() -> Option<f64> {
    Some(0.5)
}

fn yes() -> bool {
    true
}

fn default_band() -> [f64; 2] {
    [0.7, 1.3]
}

/// Pairs both filters with their dual solutions on one observation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualCheckConfig {
    pub epsilon: f64,
    /// Terminal condition `exp(-(x - center)^2 / scale^2)`.
    pub center: f64,
    pub scale: f64,
    pub x_axis: Axis,
    pub z_axis: Axis,
    pub particles: usize,
    /// Times at which `rho_t(v_t)` is compared with `rho_0(v_0)`.
    pub times: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub full_dual: FullDualOptions,
}

fn default_tolerance() -> f64 {
    0.02
}

/// Compares `|psi_0|` at `epsilon` and `epsilon / 2` over several
/// observation paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorCheckConfig {
    pub epsilon: f64,
    /// `(x, z)` pairs.
    pub probes: Vec<[f64; 2]>,
    pub paths: usize,
    pub center: f64,
    pub scale: f64,
    pub x_axis: Axis,
    pub corrector: CorrectorConfig,
    #[serde(default = "default_ratio_band")]
    pub ratio_band: [f64; 2],
}

fn default_ratio_band() -> [f64; 2] {
    [1.4, 2.8]
}

impl ExperimentConfig {
    /// Reads the configuration and resolves the model path against the
    /// configuration's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        if cfg.model.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.model = dir.join(&cfg.model);
            }
        }
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "experiment configuration".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epsilons.is_empty() {
            return bad("the epsilon list is empty".into());
        }
        if self.epsilons.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return bad(format!("epsilon values must lie in (0, 1), got {:?}", self.epsilons));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("epsilon values must be strictly decreasing, got {:?}", self.epsilons));
        }
        if self.replications < 2 {
            return bad("at least 2 replications are needed for a standard error".into());
        }
        if self.particles < 2 {
            return bad("at least 2 particles are needed".into());
        }
        if self.test_functions == 0 || self.test_functions > METRIC_FAMILY_SIZE {
            return bad(format!("test_functions must be between 1 and {METRIC_FAMILY_SIZE}"));
        }
        if self.moment == 0 {
            return bad("the error moment must be at least 1".into());
        }
        if let Some(t) = self.resampling {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("resampling threshold {t} outside (0, 1]"));
            }
        }
        if !(self.slope_band[0] < self.slope_band[1]) {
            return bad("slope_band must be an increasing pair".into());
        }
        let grid = self.grid()?;
        if self.probe_times.iter().any(|&t| !(0.0..=grid.horizon).contains(&t)) {
            return bad("probe times must lie in [0, horizon]".into());
        }
        if let Some(dc) = &self.dual_check {
            if !(dc.epsilon > 0.0 && dc.epsilon < 1.0) || dc.particles < 2 || !(dc.scale > 0.0) || !(dc.tolerance > 0.0) {
                return bad("invalid dual_check section".into());
            }
            dc.x_axis.validate()?;
            dc.z_axis.validate()?;
            if dc.times.iter().any(|&t| !(0.0..=grid.horizon).contains(&t)) {
                return bad("dual_check times must lie in [0, horizon]".into());
            }
        }
        if let Some(cc) = &self.corrector_check {
            if !(cc.epsilon > 0.0 && cc.epsilon < 1.0) || cc.paths == 0 || cc.probes.is_empty() || !(cc.scale > 0.0) {
                return bad("invalid corrector_check section".into());
            }
            cc.x_axis.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps, self.fast_factor)
    }

    /// Family members `1..=max(K, 16)`: the first `K` enter the paired error,
    /// the first 16 the weak metric.
    pub fn family(&self) -> Vec<TestFunction> {
        TestFunction::family(self.test_functions.max(METRIC_FAMILY_SIZE))
    }

    pub fn load_model(&self) -> Result<MultiscaleModel> {
        MultiscaleModel::load(&self.model)
    }

    /// Homogenized model at any epsilon: the averages do not depend on it.
    pub fn homogenize(&self, model: &NormalizedModel) -> Result<HomogenizedModel> {
        self.homogenize_with(model, self.homogenization.as_ref())
    }

    pub(crate) fn homogenize_with(&self, model: &NormalizedModel, spec: Option<&HomogenizationSpec>) -> Result<HomogenizedModel> {
        match spec {
            Some(spec) => homogenize(model, spec, self.seed),
            None if model.model().is_z_free() => {
                // Any spec works; the exact source ignores it.
                let spec = HomogenizationSpec::ClosedForm(crate::averaging::ClosedFormSpec {
                    bbar: serde_json::Value::Null,
                    abar: serde_json::Value::Null,
                    sigbar: serde_json::Value::Null,
                    hbar: serde_json::Value::Null,
                });
                homogenize(model, &spec, self.seed)
            }
            None => Err(Error::Config(
                "the slow coefficients depend on z; a `homogenization` section is required".into(),
            )),
        }
    }

    /// Normalized model at each epsilon of the sweep.
    pub fn models(&self, base: &MultiscaleModel) -> Result<Vec<NormalizedModel>> {
        self.epsilons
            .iter()
            .map(|&e| normalize_correlation(&base.with_epsilon(e)?))
            .collect()
    }
}
