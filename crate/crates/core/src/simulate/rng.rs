//! Counter-based random streams. A stream is identified by a global seed, a
//! purpose tag and an index path; every distinct identity maps to a distinct
//! ChaCha stream, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Purpose {
    Path,
    FilterInitial,
    FilterSlow,
    FilterFast,
    ReducedInitial,
    ReducedSlow,
    ReducedHat,
    Resample,
    Invariant,
    Corrector,
    Diagnostics,
    Bootstrap,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Path => 1,
            Purpose::FilterInitial => 2,
            Purpose::FilterSlow => 3,
            Purpose::FilterFast => 4,
            Purpose::ReducedInitial => 5,
            Purpose::ReducedSlow => 6,
            Purpose::ReducedHat => 7,
            Purpose::Resample => 8,
            Purpose::Invariant => 9,
            Purpose::Corrector => 10,
            Purpose::Diagnostics => 11,
            Purpose::Bootstrap => 12,
            Purpose::Test => 13,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct RngStream {
    pub seed: u64,
    pub purpose: Purpose,
    /// Hashed index path (replication, particle, ...).
    pub index: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        RngStream {
            seed,
            purpose,
            index: splitmix64(index),
        }
    }

    /// Same index path, different purpose.
    pub fn with_purpose(self, purpose: Purpose) -> Self {
        RngStream { purpose, ..self }
    }

    /// A sub-stream, e.g. one per particle.
    pub fn child(self, sub: u64) -> Self {
        RngStream {
            index: splitmix64(self.index ^ splitmix64(sub.wrapping_add(0x5851_F42D_4C95_7F2D))),
            ..self
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(splitmix64(self.index ^ self.purpose.tag().wrapping_mul(0xD6E8_FEB8_6659_FD93)));
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_identity_reproduces() {
        let s = RngStream::new(7, Purpose::Path, 3).child(11);
        let a: Vec<u64> = s.rng().random_iter().take(8).collect();
        let b: Vec<u64> = s.rng().random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_identities_differ() {
        let base = RngStream::new(7, Purpose::Path, 3);
        let draws = |s: RngStream| s.rng().random::<u64>();
        let variants = [
            base,
            base.child(0),
            base.child(1),
            base.with_purpose(Purpose::FilterSlow),
            RngStream::new(8, Purpose::Path, 3),
            RngStream::new(7, Purpose::Path, 4),
        ];
        for i in 0..variants.len() {
            for j in i + 1..variants.len() {
                assert_ne!(draws(variants[i]), draws(variants[j]), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn streams_are_uncorrelated() {
        let n = 20_000;
        let a: Vec<f64> = RngStream::new(1, Purpose::Test, 0).rng().random_iter().take(n).collect();
        let b: Vec<f64> = RngStream::new(1, Purpose::Test, 1).rng().random_iter().take(n).collect();
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - 0.5) * (y - 0.5)).sum::<f64>() / n as f64;
        // Var of uniform is 1/12; the sample covariance has sd (1/12)/sqrt(n).
        assert!(cov.abs() < 4.0 / 12.0 / (n as f64).sqrt());
    }
}
