//! The epsilon sweep: paired runs of the full and reduced filters on common
//! observation paths, aggregated into error-versus-epsilon tables and a
//! log-log rate fit.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::{ExperimentConfig, Expectation};
use super::metric::weak_metric_from_values;
use crate::averaging::{HomogenizationSpec, HomogenizedModel};
use crate::error::{Error, Result};
use crate::filters::{run_full_filter, run_reduced_filter, FilterConfig, FilterRun};
use crate::linalg;
use crate::model::{MultiscaleModel, NormalizedModel, METRIC_FAMILY_SIZE};
use crate::simulate::{simulate_joint, Purpose, RngStream, TimeGrid};

/// Largest relative change of the error under refinement that still counts
/// as a satisfied bias budget.
pub const BIAS_SHIFT_LIMIT: f64 = 0.25;

/// Confidence level of the slope interval.
pub const SLOPE_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiError {
    pub phi_id: usize,
    pub mean_err: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeError {
    pub t: f64,
    pub error: f64,
    pub stderr: f64,
}

/// Aggregates at one epsilon over the replications that completed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub replications: usize,
    pub per_phi: Vec<PhiError>,
    /// Paired error averaged over the `K` test functions; the fitted quantity.
    pub error: f64,
    pub stderr: f64,
    pub metric_mean: f64,
    pub metric_stderr: f64,
    pub probes: Vec<ProbeError>,
}

/// Ordinary least squares of `log y` on `log epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_ci: [f64; 2],
    pub confidence: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasBudget {
    pub epsilon: f64,
    pub particles: usize,
    pub steps: usize,
    pub error: f64,
    pub stderr: f64,
    pub refined_particles: usize,
    pub refined_steps: usize,
    pub refined_error: f64,
    pub refined_stderr: f64,
    /// `|refined - error| / error`.
    pub shift: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub stage: String,
    pub epsilon: f64,
    pub replication: usize,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub rows: Vec<EpsilonSummary>,
    pub fit: Option<Fit>,
    pub metric_fit: Option<Fit>,
    /// Why a fit is missing.
    pub fit_refusal: Option<String>,
    /// Every pair of errors agrees within twice its combined standard error.
    pub flat: bool,
    pub monotone: bool,
    pub bias: Option<BiasBudget>,
    pub failures: Vec<Failure>,
    pub gates: Vec<Gate>,
}

impl ConvergenceReport {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn gates_passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    /// Flag for the fit summary.
    pub fn flag(&self) -> Option<&'static str> {
        self.flat.then_some("no epsilon-dependence")
    }
}

/// One replication at one epsilon: `|Delta_k|` at the horizon for each
/// reported test function, the metric, and `|Delta_k|` at each probe.
#[derive(Debug, Clone)]
struct Replication {
    diffs: Vec<f64>,
    metric: f64,
    probe_diffs: Vec<Vec<f64>>,
}

fn filter_config(cfg: &ExperimentConfig, grid: &TimeGrid, particles: usize) -> (FilterConfig, Vec<usize>) {
    let mut checkpoints: Vec<usize> = cfg.probe_times.iter().map(|&t| grid.index_of(t)).collect();
    let probes = checkpoints.clone();
    checkpoints.push(grid.steps);
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let fc = FilterConfig {
        particles,
        resampling: cfg.resampling,
        checkpoints,
        test_functions: cfg.family(),
        coupling: cfg.coupling,
    };
    (fc, probes)
}

fn pi_at(run: &FilterRun, step: usize) -> &[f64] {
    &run.estimates.iter().find(|e| e.step == step).expect("checkpoint recorded").pi
}

fn replicate(
    cfg: &ExperimentConfig,
    model: &NormalizedModel,
    homog: &HomogenizedModel,
    grid: &TimeGrid,
    fc: &FilterConfig,
    probes: &[usize],
    r: usize,
) -> Result<Replication> {
    let k = cfg.test_functions;
    let path = simulate_joint(model, grid, RngStream::new(cfg.seed, Purpose::Path, r as u64))?;
    let stream = RngStream::new(cfg.seed, Purpose::FilterInitial, r as u64);
    let full = run_full_filter(model, &path.obs, fc, stream)?;
    let reduced = run_reduced_filter(homog, &path.obs, fc, stream)?;
    let diffs_at = |step: usize| -> Vec<f64> {
        let (a, b) = (pi_at(&full, step), pi_at(&reduced, step));
        a[..k].iter().zip(&b[..k]).map(|(x, y)| (x - y).abs()).collect()
    };
    let (a, b) = (pi_at(&full, grid.steps), pi_at(&reduced, grid.steps));
    Ok(Replication {
        diffs: diffs_at(grid.steps),
        metric: weak_metric_from_values(&a[..METRIC_FAMILY_SIZE], &b[..METRIC_FAMILY_SIZE]),
        probe_diffs: probes.iter().map(|&s| diffs_at(s)).collect(),
    })
}

/// `(mean |Delta|^p)^{1/p}` with a delta-method standard error.
fn moment_estimate(values: impl Iterator<Item = f64>, p: u32) -> (f64, f64) {
    let powered: Vec<f64> = values.map(|v| v.powi(p as i32)).collect();
    let (m, se) = linalg::mean_se(&powered);
    if p == 1 {
        return (m, se);
    }
    let inv = 1.0 / p as f64;
    let e = m.powf(inv);
    let se = if m > 0.0 { se * inv * e / m } else { 0.0 };
    (e, se)
}

fn summarize(cfg: &ExperimentConfig, epsilon: f64, reps: &[Replication], probes: &[usize], grid: &TimeGrid) -> EpsilonSummary {
    let p = cfg.moment;
    let k = cfg.test_functions;
    let per_phi = (0..k)
        .map(|j| {
            let (mean_err, stderr) = moment_estimate(reps.iter().map(|r| r.diffs[j]), p);
            PhiError {
                phi_id: j + 1,
                mean_err,
                stderr,
            }
        })
        .collect();
    // Average over phi inside each replication, so the standard error sees
    // the correlation between test functions.
    let averaged = |d: &[f64]| (d.iter().map(|v| v.powi(p as i32)).sum::<f64>() / k as f64).powf(1.0 / p as f64);
    let (error, stderr) = moment_estimate(reps.iter().map(|r| averaged(&r.diffs)), p);
    let metrics: Vec<f64> = reps.iter().map(|r| r.metric).collect();
    let (metric_mean, metric_stderr) = linalg::mean_se(&metrics);
    let probes = probes
        .iter()
        .enumerate()
        .map(|(q, &s)| {
            let (error, stderr) = moment_estimate(reps.iter().map(|r| averaged(&r.probe_diffs[q])), p);
            ProbeError {
                t: grid.time(s),
                error,
                stderr,
            }
        })
        .collect();
    EpsilonSummary {
        epsilon,
        replications: reps.len(),
        per_phi,
        error,
        stderr,
        metric_mean,
        metric_stderr,
        probes,
    }
}

/// Runs every `(epsilon, replication)` pair, in parallel, and returns the
/// outcomes in sweep order.
fn sweep(
    cfg: &ExperimentConfig,
    models: &[NormalizedModel],
    homog: &HomogenizedModel,
    grid: &TimeGrid,
    particles: usize,
    stage: &str,
) -> Result<(Vec<Vec<Replication>>, Vec<usize>, Vec<Failure>)> {
    let (fc, probes) = filter_config(cfg, grid, particles);
    fc.validate(grid.steps)?;
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|e| (0..cfg.replications).map(move |r| (e, r))).collect();
    let outcomes: Vec<Result<Replication>> = jobs
        .par_iter()
        .map(|&(e, r)| replicate(cfg, &models[e], homog, grid, &fc, &probes, r))
        .collect();
    let mut reps = vec![Vec::new(); models.len()];
    let mut failures = Vec::new();
    for (&(e, r), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(rep) => reps[e].push(rep),
            Err(err) => failures.push(Failure {
                stage: stage.into(),
                epsilon: models[e].epsilon(),
                replication: r,
                exit_code: err.exit_code(),
                message: err.to_string(),
            }),
        }
    }
    Ok((reps, probes, failures))
}

/// Least squares of `log y` on `log x` with a Student-t interval for the
/// slope. Refuses fewer than 3 points or non-positive values.
pub fn fit_log_log(x: &[f64], y: &[f64]) -> Result<Fit> {
    if x.len() != y.len() {
        return Err(Error::Config("fit inputs differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Config(format!("a slope fit needs at least 3 epsilon values, got {n}")));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Check("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Check("log-log fit needs distinct epsilon values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = lx.iter().zip(&ly).map(|(a, b)| b - (intercept + slope * a)).collect();
    let dof = (n - 2) as f64;
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / dof;
    let half = if s2 > 0.0 {
        let t = StudentsT::new(0.0, 1.0, dof)
            .map_err(|e| Error::Check(format!("t distribution: {e}")))?
            .inverse_cdf(0.5 + SLOPE_CONFIDENCE / 2.0);
        t * (s2 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(Fit {
        slope,
        intercept,
        slope_ci: [slope - half, slope + half],
        confidence: SLOPE_CONFIDENCE,
        residuals,
    })
}

/// True when every pair of values agrees within twice its combined
/// standard error.
pub fn within_noise(values: &[f64], stderr: &[f64]) -> bool {
    (0..values.len()).all(|i| (i + 1..values.len()).all(|j| (values[i] - values[j]).abs() <= 2.0 * stderr[i].hypot(stderr[j])))
}

/// Sampler with four times as many retained samples, for the refinement run.
fn refined_homogenization(spec: Option<&HomogenizationSpec>) -> Option<HomogenizationSpec> {
    spec.map(|s| match s {
        HomogenizationSpec::Lattice { lattice, sampler } => HomogenizationSpec::Lattice {
            lattice: lattice.clone(),
            sampler: crate::averaging::InvariantSamplerConfig {
                retained: sampler.retained * 4,
                ..sampler.clone()
            },
        },
        other => other.clone(),
    })
}

fn gates(cfg: &ExperimentConfig, report: &ConvergenceReport) -> Vec<Gate> {
    let band = cfg.slope_band;
    let slope_gate = |name: &str, fit: &Option<Fit>| match fit {
        Some(f) => Gate {
            name: name.into(),
            passed: f.slope >= band[0] && f.slope <= band[1],
            detail: format!("slope {:.3} (CI [{:.3}, {:.3}]) against band [{}, {}]", f.slope, f.slope_ci[0], f.slope_ci[1], band[0], band[1]),
        },
        None => Gate {
            name: name.into(),
            passed: false,
            detail: report.fit_refusal.clone().unwrap_or_else(|| "no fit".into()),
        },
    };
    match cfg.expect {
        Expectation::None => Vec::new(),
        Expectation::Rate => vec![
            slope_gate("error_slope", &report.fit),
            slope_gate("metric_slope", &report.metric_fit),
            Gate {
                name: "monotone".into(),
                passed: report.monotone,
                detail: format!("errors {:?}", report.rows.iter().map(|r| r.error).collect::<Vec<_>>()),
            },
            match &report.bias {
                Some(b) => Gate {
                    name: "bias_budget".into(),
                    passed: b.passed,
                    detail: format!("shift {:.3} at epsilon {} against limit {BIAS_SHIFT_LIMIT}", b.shift, b.epsilon),
                },
                None => Gate {
                    name: "bias_budget".into(),
                    passed: false,
                    detail: "refinement run missing".into(),
                },
            },
        ],
        Expectation::Flat => vec![Gate {
            name: "flat".into(),
            passed: report.flat,
            detail: format!(
                "errors {:?} with standard errors {:?}",
                report.rows.iter().map(|r| r.error).collect::<Vec<_>>(),
                report.rows.iter().map(|r| r.stderr).collect::<Vec<_>>()
            ),
        }],
    }
}

/// Loads the model named in the configuration and runs the study.
pub fn run_convergence_study(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let base = cfg.load_model()?;
    run_convergence_study_with(cfg, &base)
}

/// Runs the study on an already loaded model; its own epsilon is ignored.
pub fn run_convergence_study_with(cfg: &ExperimentConfig, base: &MultiscaleModel) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let models = cfg.models(base)?;
    let homog = cfg.homogenize(&models[0])?;
    let grid = cfg.grid()?;
    let (reps, probes, mut failures) = sweep(cfg, &models, &homog, &grid, cfg.particles, "study")?;
    let rows: Vec<EpsilonSummary> = cfg
        .epsilons
        .iter()
        .zip(&reps)
        .filter(|(_, r)| r.len() >= 2)
        .map(|(&e, r)| summarize(cfg, e, r, &probes, &grid))
        .collect();

    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let (fit, metric_fit, fit_refusal) = {
        let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
        let metrics: Vec<f64> = rows.iter().map(|r| r.metric_mean).collect();
        match (fit_log_log(&eps, &errs), fit_log_log(&eps, &metrics)) {
            (Ok(a), Ok(b)) => (Some(a), Some(b), None),
            (a, b) => {
                let why = [a.as_ref().err(), b.as_ref().err()].into_iter().flatten().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
                (a.ok(), b.ok(), Some(why))
            }
        }
    };
    let flat = within_noise(&rows.iter().map(|r| r.error).collect::<Vec<_>>(), &rows.iter().map(|r| r.stderr).collect::<Vec<_>>());
    let monotone = rows.len() == cfg.epsilons.len() && rows.windows(2).all(|w| w[1].error < w[0].error);

    let bias = if cfg.bias_budget && rows.first().is_some_and(|r| r.epsilon == cfg.epsilons[0]) {
        let refined_grid = grid.refined(2);
        let refined_particles = 2 * cfg.particles;
        let refined_homog = cfg.homogenize_with(&models[0], refined_homogenization(cfg.homogenization.as_ref()).as_ref())?;
        let (refined, _, more) = sweep(cfg, &models[..1], &refined_homog, &refined_grid, refined_particles, "bias_budget")?;
        failures.extend(more);
        (refined[0].len() >= 2).then(|| {
            let base = &rows[0];
            let r = summarize(cfg, base.epsilon, &refined[0], &[], &refined_grid);
            let shift = (r.error - base.error).abs() / base.error;
            BiasBudget {
                epsilon: base.epsilon,
                particles: cfg.particles,
                steps: cfg.steps,
                error: base.error,
                stderr: base.stderr,
                refined_particles,
                refined_steps: refined_grid.steps,
                refined_error: r.error,
                refined_stderr: r.stderr,
                shift,
                passed: shift < BIAS_SHIFT_LIMIT,
            }
        })
    } else {
        None
    };

    let mut report = ConvergenceReport {
        config: cfg.clone(),
        rows,
        fit,
        metric_fit,
        fit_refusal,
        flat,
        monotone,
        bias,
        failures,
        gates: Vec::new(),
    };
    report.gates = gates(cfg, &report);
    Ok(report)
}
