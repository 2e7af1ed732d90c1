use super::*;
use crate::model::MultiscaleModel;

fn model_json(b: &str, h: &str) -> String {
    format!(
        r#"{{
          "dims": {{"m": 1, "n": 1, "d": 1, "w": 1, "v": 1, "u": 1}},
          "epsilon": 0.5,
          "b": ["{b}"], "sigma": [["1"]],
          "f": ["-z1"], "g": [["sqrt(2)"]],
          "h": ["{h}"],
          "alpha": [[0.5]], "gamma": [[0.8660254037844386]],
          "initial_law": {{"x": [{{"gaussian": {{"mean": 0.0, "sd": 1.0}}}}], "z": [{{"gaussian": {{"mean": 0.0, "sd": 1.0}}}}]}}
        }}"#
    )
}

fn config_json(extra: &str) -> String {
    format!(
        r#"{{
          "model": "model.json",
          "epsilons": [0.5, 0.35, 0.25],
          "replications": 4,
          "particles": 64,
          "horizon": 0.5,
          "steps": 40,
          "test_functions": 4,
          "seed": 17,
          "homogenization": {{"closed_form": {{"bbar": ["-x1"], "abar": [["1"]], "sigbar": [["1"]], "hbar": ["tanh(x1)"]}}}}
          {extra}
        }}"#
    )
}

fn benchmark() -> MultiscaleModel {
    MultiscaleModel::from_json_str(&model_json("-x1 + 0.5*z1", "tanh(x1) + 0.5*tanh(z1)")).unwrap()
}

#[test]
fn config_validation_refuses_bad_sweeps() {
    assert!(ExperimentConfig::from_json_str(&config_json("")).is_ok());
    let bad = [
        ("epsilons", "[]"),
        ("epsilons", "[0.25, 0.5]"),
        ("epsilons", "[1.0, 0.5]"),
        ("epsilons", "[0.5, 0.5]"),
        ("replications", "1"),
        ("test_functions", "17"),
        ("probe_times", "[0.75]"),
        ("resampling", "1.5"),
        ("moment", "0"),
    ];
    for (key, value) in bad {
        let mut obj: serde_json::Value = serde_json::from_str(&config_json("")).unwrap();
        obj[key] = serde_json::from_str(value).unwrap();
        assert!(ExperimentConfig::from_json_str(&obj.to_string()).is_err(), "{key} = {value} accepted");
    }
}

#[test]
fn exact_power_law_gives_exact_fit() {
    let eps = [0.5, 0.35, 0.25, 0.18, 0.125];
    let y: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(1.2)).collect();
    let fit = fit_log_log(&eps, &y).unwrap();
    assert!((fit.slope - 1.2).abs() < 1e-12);
    assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
    assert_eq!(fit.residuals.len(), 5);
    assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
}

#[test]
fn slope_interval_uses_student_t() {
    // Points symmetric about the line y = x in log space.
    let x: Vec<f64> = [0.0f64, 1.0, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let ly = [0.1, 0.9, 2.1, 2.9];
    let y: Vec<f64> = ly.iter().map(|v: &f64| v.exp()).collect();
    let fit = fit_log_log(&x, &y).unwrap();
    // By hand: sxx = 5, sxy = 4.8, residuals (0.04, -0.12, 0.12, -0.04), s^2 = 0.032 / 2.
    assert!((fit.slope - 0.96).abs() < 1e-12);
    let half = 4.302652729749464 * (0.016f64 / 5.0).sqrt();
    assert!((fit.slope_ci[1] - fit.slope - half).abs() < 1e-6, "{:?}", fit.slope_ci);
    assert!((fit.slope - fit.slope_ci[0] - half).abs() < 1e-6);
}

#[test]
fn fit_refuses_fewer_than_three_points() {
    assert!(fit_log_log(&[0.5, 0.25], &[0.1, 0.05]).is_err());
    assert!(fit_log_log(&[0.5, 0.25, 0.1], &[0.1, 0.0, 0.01]).is_err());
}

#[test]
fn noise_band_comparison() {
    assert!(within_noise(&[1.0, 1.08, 0.95], &[0.05, 0.05, 0.05]));
    assert!(!within_noise(&[1.0, 1.5], &[0.05, 0.05]));
}

#[test]
fn study_is_reproducible_across_worker_counts() {
    let cfg = ExperimentConfig::from_json_str(&config_json(r#", "probe_times": [0.25], "bias_budget": false"#)).unwrap();
    let m = benchmark();
    let a = with_workers(Some(1), || run_convergence_study_with(&cfg, &m)).unwrap().unwrap();
    let b = with_workers(Some(3), || run_convergence_study_with(&cfg, &m)).unwrap().unwrap();
    assert_eq!(errors_csv(&a), errors_csv(&b));
    assert!(!a.is_partial());
    for row in &a.rows {
        assert_eq!(row.replications, 4);
        assert_eq!(row.probes.len(), 1);
        assert!(row.per_phi.iter().all(|e| e.mean_err >= 0.0 && e.mean_err <= 2.0));
        assert!(row.metric_mean >= 0.0 && row.metric_mean < 1.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&a, dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epsilon,phi_id,mean_err,stderr,metric_d_mean"));
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["residuals"].as_array().unwrap().len(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn z_free_model_is_flagged_flat() {
    let cfg = ExperimentConfig::from_json_str(&config_json(r#", "coupling": "independent", "expect": "flat", "bias_budget": false"#)).unwrap();
    let m = MultiscaleModel::from_json_str(&model_json("-x1", "tanh(x1)")).unwrap();
    let report = run_convergence_study_with(&cfg, &m).unwrap();
    let errs: Vec<f64> = report.rows.iter().map(|r| r.error).collect();
    assert!(errs.iter().all(|&e| e == errs[0] && e > 0.0), "{errs:?}");
    assert!(report.flat);
    assert_eq!(report.flag(), Some("no epsilon-dependence"));
    assert!(report.gates_passed());
}

#[test]
fn failing_replications_give_partial_report() {
    let cfg = ExperimentConfig::from_json_str(&config_json(r#", "bias_budget": false"#)).unwrap();
    let mut m = benchmark();
    m.h = crate::model::Field::parse(1, 1, (1, 1), &["sqrt(x1) + 0.5*tanh(z1)"]).unwrap();
    m.unsafe_unbounded = true;
    let report = run_convergence_study_with(&cfg, &m).unwrap();
    assert!(report.is_partial());
    assert!(report.failures.iter().all(|f| f.exit_code == 3 && f.stage == "study"));
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["partial"], true);
    assert_eq!(manifest["failures"].as_array().unwrap().len(), report.failures.len());
}

#[test]
fn bias_budget_reports_refined_run() {
    let cfg = ExperimentConfig::from_json_str(&config_json(r#", "expect": "rate""#)).unwrap();
    let report = run_convergence_study_with(&cfg, &benchmark()).unwrap();
    let b = report.bias.as_ref().unwrap();
    assert_eq!((b.refined_particles, b.refined_steps), (128, 80));
    assert_eq!(b.error, report.rows[0].error);
    assert!((b.shift - (b.refined_error - b.error).abs() / b.error).abs() < 1e-15);
    assert_eq!(report.gates.len(), 4);
}

#[test]
fn z_dependent_model_needs_homogenization() {
    let text = config_json("").replace(
        r#""homogenization": {"closed_form": {"bbar": ["-x1"], "abar": [["1"]], "sigbar": [["1"]], "hbar": ["tanh(x1)"]}}"#,
        r#""bias_budget": false"#,
    );
    let cfg = ExperimentConfig::from_json_str(&text).unwrap();
    assert!(matches!(run_convergence_study_with(&cfg, &benchmark()), Err(crate::Error::Config(_))));
}

#[test]
fn model_path_resolves_against_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.json"), model_json("-x1", "tanh(x1)")).unwrap();
    std::fs::write(dir.path().join("cfg.json"), config_json("")).unwrap();
    let cfg = ExperimentConfig::load(&dir.path().join("cfg.json")).unwrap();
    assert_eq!(cfg.model, dir.path().join("model.json"));
    assert!(cfg.load_model().unwrap().is_z_free());
}
