//! Problem data: coefficient fields, dimensions, noise correlation and the
//! normalization that turns the observation noise into a standard Brownian
//! motion.

pub mod coefficient;
pub mod diagnostics;
pub mod expr;
pub mod test_function;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg;
pub use coefficient::{Builtin, Field};
pub use diagnostics::{check_assumptions, AssumptionReport, DiagnosticOptions, SamplingBox};
pub use expr::{parse_expression, CoefficientExpr};
pub use test_function::{TestFunction, METRIC_FAMILY_SIZE};

/// Tolerance for the identity `alpha alpha^* + gamma gamma^* = I` after
/// normalization.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Eigenvalue clamp used for the `(I - alpha^* alpha)^{1/2}` factor.
pub const SQRT_CLAMP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Slow state dimension.
    pub m: usize,
    /// Fast state dimension.
    pub n: usize,
    /// Observation dimension.
    pub d: usize,
    /// Slow noise dimension.
    pub w: usize,
    /// Fast noise dimension.
    pub v: usize,
    /// Independent observation noise dimension.
    pub u: usize,
}

/// One coordinate of the initial law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Marginal {
    Point(f64),
    Gaussian { mean: f64, sd: f64 },
}

impl Marginal {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::Point(v) => v,
            Marginal::Gaussian { mean, sd } => {
                let e: f64 = rng.sample(StandardNormal);
                mean + sd * e
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Point(v) => v,
            Marginal::Gaussian { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Point(_) => 0.0,
            Marginal::Gaussian { sd, .. } => sd * sd,
        }
    }
}

/// Product initial law for `(X_0, Z_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub x: Vec<Marginal>,
    pub z: Vec<Marginal>,
}

impl InitialLaw {
    pub fn sample_x<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.x) {
            *o = m.sample(rng);
        }
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(&self.z) {
            *o = m.sample(rng);
        }
    }
}

/// Full coefficient set of the slow-fast signal and correlated observation.
#[derive(Debug, Clone)]
pub struct MultiscaleModel {
    pub dims: Dims,
    pub epsilon: f64,
    /// Slow drift, `m x 1`.
    pub b: Field,
    /// Slow diffusion, `m x w`.
    pub sigma: Field,
    /// Fast drift, `n x 1`.
    pub f: Field,
    /// Fast diffusion, `n x v`.
    pub g: Field,
    /// Sensor function, `d x 1`.
    pub h: Field,
    /// `d x w`, row-major.
    pub alpha: Vec<f64>,
    /// `d x u`, row-major.
    pub gamma: Vec<f64>,
    pub initial_law: InitialLaw,
    /// Allows the unbounded linear family in `b`, `sigma` and `h`.
    pub unsafe_unbounded: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    dims: Dims,
    epsilon: f64,
    b: Value,
    sigma: Value,
    f: Value,
    g: Value,
    h: Value,
    alpha: Value,
    gamma: Value,
    initial_law: InitialLaw,
    #[serde(default)]
    unsafe_unbounded: bool,
}

impl MultiscaleModel {
    /// Validates shapes, `epsilon` and the boundedness flag.
    pub fn validate(&self) -> Result<()> {
        let Dims { m, n, d, w, v, u } = self.dims;
        if [m, n, d, w, v, u].contains(&0) {
            return Err(Error::Model("all dimensions must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Model(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        let shapes = [
            ("b", &self.b, m, 1),
            ("sigma", &self.sigma, m, w),
            ("f", &self.f, n, 1),
            ("g", &self.g, n, v),
            ("h", &self.h, d, 1),
        ];
        for (name, field, r, c) in shapes {
            if field.rows() != r || field.cols() != c {
                return Err(Error::Model(format!(
                    "`{name}` has shape {}x{}, expected {r}x{c}",
                    field.rows(),
                    field.cols()
                )));
            }
        }
        if self.alpha.len() != d * w || self.gamma.len() != d * u {
            return Err(Error::Model("alpha must be d x w and gamma d x u".into()));
        }
        if self.alpha.iter().chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(Error::Model("alpha and gamma must be finite".into()));
        }
        if self.initial_law.x.len() != m || self.initial_law.z.len() != n {
            return Err(Error::Model("initial law must list m slow and n fast marginals".into()));
        }
        for marg in self.initial_law.x.iter().chain(&self.initial_law.z) {
            let ok = match *marg {
                Marginal::Point(v) => v.is_finite(),
                Marginal::Gaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            };
            if !ok {
                return Err(Error::Model(format!("invalid initial marginal {marg:?}")));
            }
        }
        if !self.unsafe_unbounded {
            for (name, field) in [("b", &self.b), ("sigma", &self.sigma), ("h", &self.h)] {
                if field.is_unbounded_linear() {
                    return Err(Error::Model(format!(
                        "`{name}` uses the unbounded linear family; set \"unsafe_unbounded\": true"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "model file".into(),
            source,
        })?;
        let dims = file.dims;
        let xz = (dims.m, dims.n);
        let model = MultiscaleModel {
            dims,
            epsilon: file.epsilon,
            b: Field::from_json("b", &file.b, dims.m, 1, xz)?,
            sigma: Field::from_json("sigma", &file.sigma, dims.m, dims.w, xz)?,
            f: Field::from_json("f", &file.f, dims.n, 1, xz)?,
            g: Field::from_json("g", &file.g, dims.n, dims.v, xz)?,
            h: Field::from_json("h", &file.h, dims.d, 1, xz)?,
            alpha: coefficient::numbers("alpha", &file.alpha, dims.d * dims.w)?,
            gamma: coefficient::numbers("gamma", &file.gamma, dims.d * dims.u)?,
            initial_law: file.initial_law,
            unsafe_unbounded: file.unsafe_unbounded,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let out = MultiscaleModel {
            epsilon,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }

    /// True when `b`, `sigma` and `h` do not depend on the fast variable.
    pub fn is_z_free(&self) -> bool {
        !self.b.depends_on_z() && !self.sigma.depends_on_z() && !self.h.depends_on_z()
    }
}

/// A model whose observation noise `alpha W + gamma U` is standard.
#[derive(Debug, Clone)]
pub struct NormalizedModel {
    model: MultiscaleModel,
    kappa: Vec<f64>,
    alpha_t: Vec<f64>,
    gamma_perp: Vec<f64>,
}

impl NormalizedModel {
    pub fn model(&self) -> &MultiscaleModel {
        &self.model
    }

    pub fn dims(&self) -> Dims {
        self.model.dims
    }

    pub fn epsilon(&self) -> f64 {
        self.model.epsilon
    }

    /// Lower-triangular `kappa` (`d x d`, row-major) with `kappa kappa^* = K`.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// `alpha^*`, `w x d`.
    pub fn alpha_t(&self) -> &[f64] {
        &self.alpha_t
    }

    /// `(I_w - alpha^* alpha)^{1/2}`, `w x w`.
    pub fn gamma_perp(&self) -> &[f64] {
        &self.gamma_perp
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut out = self.clone();
        out.model = self.model.with_epsilon(epsilon)?;
        Ok(out)
    }
}

/// Cholesky-rescale the observation so that its noise is standard:
/// `h <- kappa^{-1} h`, `alpha <- kappa^{-1} alpha`, `gamma <- kappa^{-1} gamma`.
pub fn normalize_correlation(model: &MultiscaleModel) -> Result<NormalizedModel> {
    model.validate()?;
    let Dims { d, w, u, .. } = model.dims;
    let aa = linalg::mul_transpose(&model.alpha, &model.alpha, d, d, w);
    let gg = linalg::mul_transpose(&model.gamma, &model.gamma, d, d, u);
    if linalg::cholesky_lower(d, &gg).is_none() {
        return Err(Error::Model("gamma gamma^* is not positive definite".into()));
    }
    let k: Vec<f64> = aa.iter().zip(&gg).map(|(a, b)| a + b).collect();
    let kappa = linalg::cholesky_lower(d, &k)
        .ok_or_else(|| Error::Model("K = alpha alpha^* + gamma gamma^* is not positive definite".into()))?;

    let identity = nalgebra::DMatrix::<f64>::identity(d, d);
    let mut normalized = model.clone();
    if kappa != identity {
        let kinv = kappa
            .clone()
            .solve_lower_triangular(&identity)
            .ok_or_else(|| Error::Model("kappa is singular".into()))?;
        let kinv_rm = linalg::to_row_major(&kinv);
        let scale = |mat: &[f64], cols: usize| {
            linalg::to_row_major(&(&kinv * linalg::to_dmatrix(d, cols, mat)))
        };
        normalized.alpha = scale(&model.alpha, w);
        normalized.gamma = scale(&model.gamma, u);
        normalized.h = model.h.premultiplied(&kinv_rm, d);
    }

    let aa = linalg::mul_transpose(&normalized.alpha, &normalized.alpha, d, d, w);
    let gg = linalg::mul_transpose(&normalized.gamma, &normalized.gamma, d, d, u);
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            let err = (aa[i * d + j] + gg[i * d + j] - target).abs();
            if err > NORMALIZATION_TOL {
                return Err(Error::Check(format!(
                    "normalized alpha alpha^* + gamma gamma^* deviates from I by {err:e}"
                )));
            }
        }
    }

    let mut alpha_t = vec![0.0; w * d];
    for i in 0..d {
        for j in 0..w {
            alpha_t[j * d + i] = normalized.alpha[i * w + j];
        }
    }
    // I_w - alpha^* alpha
    let ata = linalg::mul_transpose(&alpha_t, &alpha_t, w, w, d);
    let resid: Vec<f64> = (0..w * w)
        .map(|idx| if idx / w == idx % w { 1.0 } else { 0.0 } - ata[idx])
        .collect();
    let gamma_perp = linalg::psd_sqrt(w, &resid, SQRT_CLAMP_TOL)
        .map_err(|ev| Error::Model(format!("I - alpha^* alpha is not PSD (eigenvalue {ev:e})")))?;

    Ok(NormalizedModel {
        model: normalized,
        kappa: linalg::to_row_major(&kappa),
        alpha_t,
        gamma_perp,
    })
}
