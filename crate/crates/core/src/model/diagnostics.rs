//! Runtime spot checks of the structural assumptions: recurrence of the fast
//! drift, uniform ellipticity of the fast diffusion, and boundedness of the
//! slow and sensor coefficients on a sampled box.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{MultiscaleModel, NormalizedModel};
use crate::linalg;
use crate::simulate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingBox {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
}

impl SamplingBox {
    /// The cube `[-half_width, half_width]` in every coordinate.
    pub fn symmetric(m: usize, n: usize, half_width: f64) -> Self {
        SamplingBox {
            x_lower: vec![-half_width; m],
            x_upper: vec![half_width; m],
            z_lower: vec![-half_width; n],
            z_upper: vec![half_width; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticOptions {
    pub samples: usize,
    /// Only points with `|z| > radius` enter the recurrence margin.
    pub radius: f64,
    /// Exponent of `|z|` in the recurrence ratio.
    pub exponent: f64,
    pub seed: u64,
    /// Largest eigenvalue ratio of `g g^*` tolerated before flagging.
    pub min_ellipticity: f64,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        DiagnosticOptions {
            samples: 4096,
            radius: 1.0,
            exponent: 2.0,
            seed: 0,
            min_ellipticity: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// `min -<f(x,z), z> / |z|^exponent` over sampled `|z| > radius`.
    pub recurrence_margin: Option<f64>,
    pub recurrence_samples: usize,
    pub ellipticity_min: f64,
    pub ellipticity_max: f64,
    pub sup_b: f64,
    pub sup_sigma: f64,
    pub sup_h: f64,
    pub eval_failures: usize,
    pub violations: Vec<String>,
}

impl AssumptionReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Samples the box and reports recurrence, ellipticity and sup-norms.
/// Violations are collected into the report, never returned as errors.
pub fn check_assumptions(model: &NormalizedModel, sbox: &SamplingBox, opts: &DiagnosticOptions) -> AssumptionReport {
    let mm: &MultiscaleModel = model.model();
    let dims = mm.dims;
    let (m, n) = (dims.m, dims.n);
    let mut rng: ChaCha8Rng = RngStream::new(opts.seed, Purpose::Diagnostics, 0).rng();

    let mut x = vec![0.0; m];
    let mut z = vec![0.0; n];
    let mut fb = vec![0.0; n];
    let mut gb = vec![0.0; n * dims.v];
    let mut bb = vec![0.0; m];
    let mut sb = vec![0.0; m * dims.w];
    let mut hb = vec![0.0; dims.d];

    let mut margin = f64::INFINITY;
    let mut margin_count = 0usize;
    let (mut emin, mut emax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sup_b, mut sup_sigma, mut sup_h) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0usize;

    let z_reach = sbox
        .z_lower
        .iter()
        .zip(&sbox.z_upper)
        .map(|(l, u)| l.abs().max(u.abs()))
        .fold(0.0f64, f64::max);

    for s in 0..opts.samples {
        for i in 0..m {
            x[i] = rng.random_range(sbox.x_lower[i]..=sbox.x_upper[i]);
        }
        // Alternate box samples with samples on shells beyond the radius so
        // the recurrence ratio always sees the far field.
        if s % 2 == 0 || z_reach <= opts.radius {
            for i in 0..n {
                z[i] = rng.random_range(sbox.z_lower[i]..=sbox.z_upper[i]);
            }
        } else {
            let mut norm = 0.0;
            for zi in z.iter_mut() {
                *zi = rng.random_range(-1.0..=1.0);
                norm += *zi * *zi;
            }
            let norm = norm.sqrt().max(1e-12);
            let r = rng.random_range(opts.radius..=z_reach.max(opts.radius * 2.0));
            for zi in z.iter_mut() {
                *zi *= r * 1.000_001 / norm;
            }
        }

        let evals = mm
            .f
            .eval(&x, &z, &mut fb)
            .and_then(|_| mm.g.eval(&x, &z, &mut gb))
            .and_then(|_| mm.b.eval(&x, &z, &mut bb))
            .and_then(|_| mm.sigma.eval(&x, &z, &mut sb))
            .and_then(|_| mm.h.eval(&x, &z, &mut hb));
        if evals.is_err() {
            failures += 1;
            continue;
        }

        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if zn > opts.radius {
            let inner: f64 = fb.iter().zip(&z).map(|(a, b)| a * b).sum();
            margin = margin.min(-inner / zn.powf(opts.exponent));
            margin_count += 1;
        }
        let ggt = linalg::mul_transpose(&gb, &gb, n, n, dims.v);
        let (lo, hi) = linalg::eigen_range(n, &ggt);
        emin = emin.min(lo);
        emax = emax.max(hi);
        sup_b = sup_b.max(sup_abs(&bb));
        sup_sigma = sup_sigma.max(sup_abs(&sb));
        sup_h = sup_h.max(sup_abs(&hb));
    }

    let mut violations = Vec::new();
    let recurrence_margin = (margin_count > 0).then_some(margin);
    match recurrence_margin {
        Some(v) if v <= 0.0 => violations.push(format!(
            "recurrence: -<f,z>/|z|^{} reaches {v:.3e} <= 0 beyond |z| = {}",
            opts.exponent, opts.radius
        )),
        None => violations.push("recurrence: no samples beyond the radius".into()),
        _ => {}
    }
    if !(emin > opts.min_ellipticity) {
        violations.push(format!("ellipticity: smallest eigenvalue of g g^* is {emin:.3e}"));
    }
    if failures > 0 {
        violations.push(format!("{failures} sample points failed to evaluate"));
    }
    for (name, v) in [("b", sup_b), ("sigma", sup_sigma), ("h", sup_h)] {
        if !v.is_finite() {
            violations.push(format!("boundedness: `{name}` is not finite on the box"));
        }
    }
    for (name, field) in [("b", &mm.b), ("sigma", &mm.sigma), ("h", &mm.h)] {
        if field.is_unbounded_linear() {
            violations.push(format!("boundedness: `{name}` is linear, hence unbounded off the box"));
        }
    }

    AssumptionReport {
        recurrence_margin,
        recurrence_samples: margin_count,
        ellipticity_min: emin,
        ellipticity_max: emax,
        sup_b,
        sup_sigma,
        sup_h,
        eval_failures: failures,
        violations,
    }
}
