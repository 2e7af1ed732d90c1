//! Uniform grids and grid functions for the one-dimensional dual solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform axis `lower, lower + pitch, ..., upper` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        let a = Axis { lower, upper, points };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::Config(format!("grid bounds [{}, {}] are not ordered", self.lower, self.upper)));
        }
        if self.points < 5 {
            return Err(Error::Config("a grid axis needs at least 5 points".into()));
        }
        Ok(())
    }

    pub fn pitch(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + i as f64 * self.pitch()
        }
    }

    /// Twice as wide around the same centre with the same pitch.
    pub fn widened(&self) -> Axis {
        let half = 0.5 * (self.upper - self.lower);
        Axis {
            lower: self.lower - half,
            upper: self.upper + half,
            points: 2 * (self.points - 1) + 1,
        }
    }

    /// Cell index and fractional offset of `x`, clamped to the axis.
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.lower) / self.pitch()).clamp(0.0, (self.points - 1) as f64);
        let i = (s.floor() as usize).min(self.points - 2);
        (i, s - i as f64)
    }
}

/// Values on an `x` grid, or on an `x` by `z` tensor grid stored with `z`
/// varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub x: Axis,
    pub z: Option<Axis>,
    pub t: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn nz(&self) -> usize {
        self.z.map_or(1, |a| a.points)
    }

    pub fn at_node(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nz() + j]
    }

    /// Linear (or bilinear) interpolation, clamped to the grid.
    pub fn value_at(&self, x: f64, z: f64) -> f64 {
        let (i, fx) = self.x.locate(x);
        match self.z {
            None => (1.0 - fx) * self.values[i] + fx * self.values[i + 1],
            Some(za) => {
                let nz = za.points;
                let (j, fz) = za.locate(z);
                let v = |a: usize, b: usize| self.values[a * nz + b];
                (1.0 - fx) * ((1.0 - fz) * v(i, j) + fz * v(i, j + 1)) + fx * ((1.0 - fz) * v(i + 1, j) + fz * v(i + 1, j + 1))
            }
        }
    }

    /// Value and the first two `x` derivatives at `x` on a one-dimensional
    /// grid, from central differences at the surrounding nodes interpolated
    /// linearly.
    pub fn derivatives_at(&self, x: f64) -> [f64; 3] {
        assert!(self.z.is_none(), "derivatives_at expects a one-dimensional grid function");
        let h = self.x.pitch();
        let n = self.x.points;
        let node = |i: usize| {
            let i = i.clamp(1, n - 2);
            let (a, b, c) = (self.values[i - 1], self.values[i], self.values[i + 1]);
            [b, (c - a) / (2.0 * h), (c - 2.0 * b + a) / (h * h)]
        };
        let (i, f) = self.x.locate(x);
        let (lo, hi) = (node(i), node(i + 1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (1.0 - f) * lo[k] + f * hi[k];
        }
        out[0] = self.value_at(x, 0.0);
        out
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Central first and second differences along a strided line.
#[inline]
pub(crate) fn central(v: &[f64], idx: usize, stride: usize, h: f64) -> (f64, f64) {
    let (a, b, c) = (v[idx - stride], v[idx], v[idx + stride]);
    ((c - a) / (2.0 * h), (c - 2.0 * b + a) / (h * h))
}

/// Linear extrapolation onto the end nodes of every line along an axis.
pub(crate) fn extrapolate_edges(v: &mut [f64], nx: usize, nz: usize) {
    for j in 0..nz {
        v[j] = 2.0 * v[nz + j] - v[2 * nz + j];
        let last = (nx - 1) * nz + j;
        v[last] = 2.0 * v[last - nz] - v[last - 2 * nz];
    }
    if nz > 1 {
        for i in 0..nx {
            let row = i * nz;
            v[row] = 2.0 * v[row + 1] - v[row + 2];
            v[row + nz - 1] = 2.0 * v[row + nz - 2] - v[row + nz - 3];
        }
    }
}
