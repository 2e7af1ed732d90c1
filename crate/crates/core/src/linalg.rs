//! Small dense helpers on row-major slices, backed by nalgebra for the
//! factorizations.

use nalgebra::DMatrix;

pub fn to_dmatrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `a * b^T` for row-major `a` (r x k) and `b` (s x k).
pub fn mul_transpose(a: &[f64], b: &[f64], r: usize, s: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * s];
    for i in 0..r {
        for j in 0..s {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * s + j] = acc;
        }
    }
    out
}

/// Lower Cholesky factor, or `None` if the matrix is not positive definite.
pub fn cholesky_lower(d: usize, sym: &[f64]) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(to_dmatrix(d, d, sym)).map(|c| c.l())
}

pub fn min_eigenvalue(d: usize, sym: &[f64]) -> f64 {
    if d == 0 {
        return 0.0;
    }
    if d == 1 {
        return sym[0];
    }
    let m = symmetrize(d, sym);
    m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn eigen_range(d: usize, sym: &[f64]) -> (f64, f64) {
    if d == 1 {
        return (sym[0], sym[0]);
    }
    let ev = symmetrize(d, sym).symmetric_eigenvalues();
    ev.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn symmetrize(d: usize, sym: &[f64]) -> DMatrix<f64> {
    let m = to_dmatrix(d, d, sym);
    (&m + m.transpose()) * 0.5
}

/// Symmetric PSD square root by eigendecomposition. Eigenvalues in
/// `[-tol, 0)` are clamped to zero; anything more negative is rejected with
/// the offending eigenvalue.
pub fn psd_sqrt(d: usize, sym: &[f64], tol: f64) -> Result<Vec<f64>, f64> {
    if d == 1 {
        let v = sym[0];
        if v < -tol {
            return Err(v);
        }
        return Ok(vec![v.max(0.0).sqrt()]);
    }
    let eig = symmetrize(d, sym).symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(*v);
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    let root = q * DMatrix::from_diagonal(&vals) * q.transpose();
    Ok(to_row_major(&root))
}

/// Neumaier compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in iter {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `ln(mean(exp(l_i)))`, stable for large magnitudes. Exactly zero for an
/// all-zero input.
pub fn log_mean_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s = compensated_sum(logs.iter().map(|&l| (l - max).exp()));
    max + (s / logs.len() as f64).ln()
}

/// Mean with a shift by the first element: a constant sequence returns that
/// constant exactly.
pub fn shifted_mean(values: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = values.len();
    let mut it = values.clone();
    let Some(first) = it.next() else {
        return f64::NAN;
    };
    let dev = compensated_sum(values.map(|v| v - first));
    first + dev / n as f64
}

/// Standard error of the mean from non-overlapping batch means.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let batches = batches.max(2).min(values.len());
    let size = values.len() / batches;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| compensated_sum(values[b * size..(b + 1) * size].iter().cloned()) / size as f64)
        .collect();
    let grand = compensated_sum(means.iter().cloned()) / batches as f64;
    let var = compensated_sum(means.iter().map(|m| (m - grand) * (m - grand))) / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Mean and standard error of i.i.d. samples.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(values.iter().cloned()) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
