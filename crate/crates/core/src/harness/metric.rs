//! Truncated weak-convergence metric over the fixed test-function family.

use crate::filters::ParticleCloud;
use crate::model::TestFunction;

/// `sum_k 2^{-k} min(1, |a_k - b_k|)` for paired expectations of family
/// members `1, 2, ...`.
pub fn weak_metric_from_values(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired expectations must have equal length");
    let mut w = 1.0;
    let mut d = 0.0;
    for (x, y) in a.iter().zip(b) {
        w *= 0.5;
        d += w * (x - y).abs().min(1.0);
    }
    d
}

/// Metric distance between two normalized clouds over `family`, whose
/// `k`-th entry gets weight `2^{-k}`. Truncating after `K` members changes
/// the value by at most `2^{-K}`.
pub fn estimate_weak_metric(mu: &ParticleCloud, nu: &ParticleCloud, family: &[TestFunction]) -> f64 {
    let a: Vec<f64> = family.iter().map(|phi| mu.pi(phi)).collect();
    let b: Vec<f64> = family.iter().map(|phi| nu.pi(phi)).collect();
    weak_metric_from_values(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::Particle;
    use crate::model::METRIC_FAMILY_SIZE;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use smallvec::smallvec;

    fn cloud(xs: &[f64]) -> ParticleCloud {
        ParticleCloud {
            particles: xs
                .iter()
                .map(|&x| Particle {
                    x: smallvec![x],
                    z: smallvec![],
                    log_w: 0.0,
                })
                .collect(),
            log_norm: 0.0,
        }
    }

    fn gaussian_cloud(mean: f64, n: usize, seed: u64) -> ParticleCloud {
        let mut rng = crate::simulate::RngStream::new(seed, crate::simulate::Purpose::Test, 0).rng();
        let xs: Vec<f64> = (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect();
        cloud(&xs)
    }

    #[test]
    fn same_cloud_is_at_distance_zero() {
        let c = gaussian_cloud(0.3, 500, 1);
        assert_eq!(estimate_weak_metric(&c, &c, &TestFunction::family(METRIC_FAMILY_SIZE)), 0.0);
    }

    #[test]
    fn far_apart_point_masses_stay_below_one() {
        let fam = TestFunction::family(METRIC_FAMILY_SIZE);
        let d = estimate_weak_metric(&cloud(&[0.0]), &cloud(&[1e6]), &fam);
        let sep: f64 = fam
            .iter()
            .enumerate()
            .map(|(k, phi)| 0.5f64.powi(k as i32 + 1) * phi.value(&[0.0]).abs().min(1.0))
            .sum();
        assert!((d - sep).abs() < 1e-15);
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn distance_shrinks_as_gaussian_means_approach() {
        let fam = TestFunction::family(METRIC_FAMILY_SIZE);
        let base = gaussian_cloud(0.0, 20_000, 2);
        // Common draws, so only the shift separates the clouds.
        let shifted = |s: f64| {
            let mut c = base.clone();
            c.particles.iter_mut().for_each(|p| p.x[0] += s);
            c
        };
        let d: Vec<f64> = [0.4, 0.1, 0.025].iter().map(|&s| estimate_weak_metric(&base, &shifted(s), &fam)).collect();
        assert!(d[0] > d[1] && d[1] > d[2] && d[2] > 0.0, "{d:?}");
    }

    proptest! {
        #[test]
        fn metric_axioms_on_random_triples(
            a in proptest::collection::vec(-3.0f64..3.0, 1..40),
            b in proptest::collection::vec(-3.0f64..3.0, 1..40),
            c in proptest::collection::vec(-3.0f64..3.0, 1..40),
        ) {
            let fam = TestFunction::family(METRIC_FAMILY_SIZE);
            let (a, b, c) = (cloud(&a), cloud(&b), cloud(&c));
            let ab = estimate_weak_metric(&a, &b, &fam);
            let ba = estimate_weak_metric(&b, &a, &fam);
            let bc = estimate_weak_metric(&b, &c, &fam);
            let ac = estimate_weak_metric(&a, &c, &fam);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-15);
        }

        #[test]
        fn truncation_bound(
            a in proptest::collection::vec(-3.0f64..3.0, 1..30),
            b in proptest::collection::vec(-3.0f64..3.0, 1..30),
            k in 1usize..METRIC_FAMILY_SIZE,
        ) {
            let (a, b) = (cloud(&a), cloud(&b));
            let short = estimate_weak_metric(&a, &b, &TestFunction::family(k));
            let long = estimate_weak_metric(&a, &b, &TestFunction::family(METRIC_FAMILY_SIZE));
            prop_assert!(short <= long);
            prop_assert!(long <= short + 0.5f64.powi(k as i32) + 1e-15);
        }
    }
}
