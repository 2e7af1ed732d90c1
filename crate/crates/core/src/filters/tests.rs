use super::*;
use crate::averaging::{homogenize, ClosedFormSpec, HomogenizationSpec};
use crate::model::{normalize_correlation, MultiscaleModel, NormalizedModel, TestFunction};
use crate::simulate::{simulate_joint, ObservationPath, Purpose, RngStream, TimeGrid};
use serde_json::json;

pub(crate) fn linear_model(alpha: f64) -> MultiscaleModel {
    let gamma = (1.0 - alpha * alpha).sqrt();
    let text = format!(
        r#"{{
          "dims": {{"m": 1, "n": 1, "d": 1, "w": 1, "v": 1, "u": 1}},
          "epsilon": 0.5,
          "b": {{"builtin": "linear", "params": {{"x": [[-1.0]]}}}},
          "sigma": [["1"]],
          "f": ["-z1"], "g": [["sqrt(2)"]],
          "h": {{"builtin": "linear", "params": {{"x": [[1.0]]}}}},
          "alpha": [[{alpha}]], "gamma": [[{gamma}]],
          "initial_law": {{"x": [{{"gaussian": {{"mean": 0.5, "sd": 0.7}}}}], "z": [{{"point": 0.0}}]}},
          "unsafe_unbounded": true
        }}"#
    );
    MultiscaleModel::from_json_str(&text).unwrap()
}

fn observe(nm: &NormalizedModel, horizon: f64, steps: usize, seed: u64) -> ObservationPath {
    let grid = TimeGrid::new(horizon, steps, 0.1).unwrap();
    simulate_joint(nm, &grid, RngStream::new(seed, Purpose::Path, 0)).unwrap().obs
}

fn config(particles: usize, checkpoints: Vec<usize>, resampling: Option<f64>) -> FilterConfig {
    FilterConfig {
        particles,
        resampling,
        checkpoints,
        test_functions: vec![TestFunction::constant(1.0), TestFunction::family_member(1), TestFunction::family_member(5)],
        coupling: Coupling::Common,
    }
}

#[test]
fn uninformative_observation_leaves_weights_equal() {
    let mut m = crate::model::tests::scalar_model(0.3, 0.9);
    m.h = crate::model::Field::parse(1, 1, (1, 1), &["0"]).unwrap();
    let nm = normalize_correlation(&m).unwrap();
    let obs = observe(&nm, 0.5, 50, 1);
    let run = run_full_filter(&nm, &obs, &config(200, vec![10, 50], Some(0.5)), RngStream::new(3, Purpose::Test, 0)).unwrap();
    assert_eq!(run.resamples, 0);
    for e in &run.estimates {
        assert_eq!(e.rho1, 1.0);
        assert_eq!(e.pi[0], 1.0);
        assert_eq!(e.ess, 200.0);
    }
    assert!(run.cloud.particles.iter().all(|p| p.log_w == 0.0));
    // The estimate of a test function is the plain average of the particles.
    let phi = TestFunction::family_member(1);
    let plain: f64 = run.cloud.particles.iter().map(|p| phi.value(&p.x)).sum::<f64>() / 200.0;
    assert!((run.estimates[1].pi[1] - plain).abs() < 1e-14);
}

#[test]
fn normalization_and_bounds_hold_with_resampling() {
    let nm = normalize_correlation(&crate::model::tests::scalar_model(0.5, 0.8)).unwrap();
    let obs = observe(&nm, 2.0, 200, 2);
    let cps: Vec<usize> = (1..=20).map(|i| i * 10).collect();
    let run = run_full_filter(&nm, &obs, &config(300, cps, Some(0.9)), RngStream::new(4, Purpose::Test, 0)).unwrap();
    assert!(run.resamples > 0);
    for e in &run.estimates {
        assert_eq!(e.pi[0], 1.0);
        assert!(e.rho1 > 0.0);
        assert!(e.pi[1].abs() <= 1.0 && e.pi[2].abs() <= 1.0);
        assert!((e.rho[1] - e.rho1 * e.pi[1]).abs() <= 1e-15 * e.rho1);
    }
    assert!(run.ess_trace.iter().all(|&s| (1.0..=300.0).contains(&s)));
    assert!(run.max_abs_log_weight <= run.weight_bound);
}

#[test]
fn z_free_reduced_filter_reproduces_full_filter() {
    let mut m = crate::model::tests::scalar_model(0.6, 0.8);
    m.b = crate::model::Field::parse(1, 1, (1, 1), &["-x1"]).unwrap();
    m.h = crate::model::Field::parse(1, 1, (1, 1), &["tanh(x1)"]).unwrap();
    let nm = normalize_correlation(&m).unwrap();
    let homog = homogenize(
        &nm,
        &HomogenizationSpec::ClosedForm(ClosedFormSpec {
            bbar: json!(["0"]),
            abar: json!([["0"]]),
            sigbar: json!([["0"]]),
            hbar: json!(["0"]),
        }),
        0,
    )
    .unwrap();
    assert!(homog.is_exact());
    let obs = observe(&nm, 1.0, 100, 5);
    let cfg = config(256, vec![25, 50, 100], Some(0.5));
    let stream = RngStream::new(9, Purpose::Test, 0);
    let full = run_full_filter(&nm, &obs, &cfg, stream).unwrap();
    let reduced = run_reduced_filter(&homog, &obs, &cfg, stream).unwrap();
    assert_eq!(full.estimates, reduced.estimates);
}

#[test]
fn vanishing_effective_diffusion_still_normalizes() {
    let mut m = crate::model::tests::scalar_model(0.6, 0.8);
    m.sigma = crate::model::Field::parse(1, 1, (1, 1), &["sin(z1)"]).unwrap();
    let nm = normalize_correlation(&m).unwrap();
    let homog = homogenize(
        &nm,
        &HomogenizationSpec::ClosedForm(ClosedFormSpec {
            bbar: json!(["-x1"]),
            abar: json!([["0.43"]]),
            sigbar: json!([["0"]]),
            hbar: json!(["tanh(x1)"]),
        }),
        0,
    )
    .unwrap();
    let obs = observe(&nm, 1.0, 100, 6);
    let run = run_reduced_filter(&homog, &obs, &config(200, vec![50, 100], Some(0.5)), RngStream::new(1, Purpose::Test, 0)).unwrap();
    for e in &run.estimates {
        assert_eq!(e.pi[0], 1.0);
        assert!(e.ess >= 1.0);
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let nm = normalize_correlation(&crate::model::tests::scalar_model(0.5, 0.8)).unwrap();
    let obs = observe(&nm, 1.0, 100, 7);
    let cfg = config(1000, vec![50, 100], Some(0.7));
    let go = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_full_filter(&nm, &obs, &cfg, RngStream::new(2, Purpose::Test, 0)).unwrap())
    };
    let a = go(1);
    let b = go(3);
    assert_eq!(a.estimates, b.estimates);
    assert_eq!(a.cloud, b.cloud);
}

#[test]
fn failing_coefficient_aborts_with_particle_index() {
    let mut m = crate::model::tests::scalar_model(0.0, 1.0);
    m.h = crate::model::Field::parse(1, 1, (1, 1), &["sqrt(x1)"]).unwrap();
    let nm = normalize_correlation(&m).unwrap();
    let obs = ObservationPath {
        grid: TimeGrid::new(0.1, 10, 0.1).unwrap(),
        d: 1,
        dy: vec![0.0; 10],
    };
    match run_full_filter(&nm, &obs, &config(50, vec![10], None), RngStream::new(0, Purpose::Test, 0)) {
        Err(crate::Error::NumericalAbort { particle: Some(_), step, .. }) if (1..=2).contains(&step) => {}
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn bad_configuration_is_rejected() {
    let nm = normalize_correlation(&crate::model::tests::scalar_model(0.0, 1.0)).unwrap();
    let obs = observe(&nm, 0.1, 10, 0);
    let s = RngStream::new(0, Purpose::Test, 0);
    assert!(run_full_filter(&nm, &obs, &config(1, vec![], None), s).is_err());
    assert!(run_full_filter(&nm, &obs, &config(10, vec![11], None), s).is_err());
    assert!(run_full_filter(&nm, &obs, &config(10, vec![], Some(1.5)), s).is_err());
}

#[test]
fn particle_mean_tracks_kalman_oracle() {
    for alpha in [0.0, 0.5] {
        let nm = normalize_correlation(&linear_model(alpha)).unwrap();
        let spec = LinearSpec::from_model(&nm).unwrap();
        let obs = observe(&nm, 1.0, 500, 11);
        let oracle = kalman_bucy_oracle(&spec, &obs).unwrap();
        let cps: Vec<usize> = (1..=5).map(|i| i * 100).collect();
        let mut se = Vec::new();
        let mut rng = RngStream::new(0, Purpose::Bootstrap, 0).rng();
        let mut observer = |_k: usize, c: &ParticleCloud| {
            se.push(c.bootstrap_se(|x, _| x[0], 100, &mut rng));
            Ok(())
        };
        let cfg = FilterConfig {
            test_functions: vec![],
            ..config(4000, cps.clone(), None)
        };
        let mut means = Vec::new();
        let mut collect = |k: usize, c: &ParticleCloud| {
            means.push(c.mean_x(0));
            observer(k, c)
        };
        run_full_filter_observed(&nm, &obs, &cfg, RngStream::new(1, Purpose::Test, 0), Some(&mut collect)).unwrap();
        for ((k, mean), se) in cps.iter().zip(&means).zip(&se) {
            let target = oracle[*k].mean[0];
            assert!((mean - target).abs() <= 3.0 * se, "alpha {alpha} step {k}: {mean} vs {target} (se {se})");
        }
    }
}
