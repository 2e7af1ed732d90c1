//! Bounded smooth test functions on the slow state space.

use serde::Serialize;

/// Size of the fixed weak-metric family.
pub const METRIC_FAMILY_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TestFunctionKind {
    Constant(f64),
    /// `exp(-|x - center|^2 / scale^2)`.
    Gaussian { center: Vec<f64>, scale: f64 },
    /// `tanh((x_1 - c) / l) * exp(-|x - c 1|^2 / (2 (4 l)^2))`.
    TanhBump { center: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    pub id: usize,
    pub kind: TestFunctionKind,
    /// Upper bound on `|phi|` over the whole space.
    pub bound: f64,
}

impl TestFunction {
    pub fn constant(c: f64) -> Self {
        TestFunction {
            id: 0,
            kind: TestFunctionKind::Constant(c),
            bound: c.abs(),
        }
    }

    pub fn gaussian(center: Vec<f64>, scale: f64) -> Self {
        TestFunction {
            id: 0,
            kind: TestFunctionKind::Gaussian { center, scale },
            bound: 1.0,
        }
    }

    /// Member `k >= 1` of the dyadic family: level `j = floor(log2 k)`,
    /// length scale `2^{1-j}`, centers spread evenly over `[-4, 4]`.
    pub fn family_member(k: usize) -> Self {
        assert!(k >= 1, "family members are numbered from 1");
        let level = usize::BITS - 1 - k.leading_zeros();
        let slots = 1usize << level;
        let i = k - slots;
        let scale = 2f64.powi(1 - level as i32);
        let center = -4.0 + 8.0 * (i as f64 + 0.5) / slots as f64;
        TestFunction {
            id: k,
            kind: TestFunctionKind::TanhBump { center, scale },
            bound: 1.0,
        }
    }

    /// The first `k` members of the dyadic family.
    pub fn family(k: usize) -> Vec<Self> {
        (1..=k).map(Self::family_member).collect()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TestFunctionKind::Constant(c) => *c,
            TestFunctionKind::Gaussian { center, scale } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                (-r2 / (scale * scale)).exp()
            }
            TestFunctionKind::TanhBump { center, scale } => {
                let width = 4.0 * scale;
                let r2: f64 = x.iter().map(|a| (a - center) * (a - center)).sum();
                ((x[0] - center) / scale).tanh() * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            TestFunctionKind::Constant(_) => out.iter_mut().for_each(|o| *o = 0.0),
            TestFunctionKind::Gaussian { center, scale } => {
                let v = self.value(x);
                for ((o, a), c) in out.iter_mut().zip(x).zip(center) {
                    *o = -2.0 * (a - c) / (scale * scale) * v;
                }
            }
            TestFunctionKind::TanhBump { center, scale } => {
                let width = 4.0 * scale;
                let r2: f64 = x.iter().map(|a| (a - center) * (a - center)).sum();
                let bump = (-r2 / (2.0 * width * width)).exp();
                let t = ((x[0] - center) / scale).tanh();
                for (i, (o, a)) in out.iter_mut().zip(x).enumerate() {
                    let mut g = -t * bump * (a - center) / (width * width);
                    if i == 0 {
                        g += (1.0 - t * t) / scale * bump;
                    }
                    *o = g;
                }
            }
        }
    }
}
