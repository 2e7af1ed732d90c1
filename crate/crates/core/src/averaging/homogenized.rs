//! Averaged slow coefficients and the reduced diffusion factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::invariant::{estimate_invariant_measure, InvariantSamplerConfig, InvariantSamples};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::expr::EvalError;
use crate::model::{Dims, Field, Marginal, MultiscaleModel, NormalizedModel};
use crate::simulate::{Purpose, RngStream};

/// Smallest eigenvalue of `abar - sigbar sigbar^*` accepted at a node.
pub const PSD_TOL: f64 = 1e-8;

/// Batches used for the standard error of the averaged sensor.
const SE_BATCHES: usize = 20;

/// Analytic averaged coefficients as expressions in `x` only. The sensor
/// average is given in the units of the model file and rescaled by the same
/// `kappa^{-1}` as the sensor itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedFormSpec {
    pub bbar: Value,
    pub abar: Value,
    pub sigbar: Value,
    pub hbar: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Node count per coordinate, at least 2 unless `lower == upper`.
    pub nodes: Vec<usize>,
}

impl LatticeSpec {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.lower.len() != m || self.upper.len() != m || self.nodes.len() != m {
            return Err(Error::Config(format!("lattice must have {m} coordinates")));
        }
        for i in 0..m {
            let degenerate = self.lower[i] == self.upper[i];
            if !(self.lower[i] <= self.upper[i]) || self.nodes[i] == 0 || (!degenerate && self.nodes[i] < 2) {
                return Err(Error::Config(format!("invalid lattice along coordinate {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Coordinates of node `idx` (last coordinate fastest).
    pub fn node(&self, mut idx: usize) -> Vec<f64> {
        let m = self.nodes.len();
        let mut x = vec![0.0; m];
        for i in (0..m).rev() {
            let k = idx % self.nodes[i];
            idx /= self.nodes[i];
            x[i] = self.coordinate(i, k);
        }
        x
    }

    fn coordinate(&self, i: usize, k: usize) -> f64 {
        if self.nodes[i] == 1 {
            self.lower[i]
        } else {
            self.lower[i] + (self.upper[i] - self.lower[i]) * k as f64 / (self.nodes[i] - 1) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HomogenizationSpec {
    ClosedForm(ClosedFormSpec),
    Lattice {
        lattice: LatticeSpec,
        sampler: InvariantSamplerConfig,
    },
}

/// Averaged coefficients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedValues {
    pub bbar: Vec<f64>,
    pub abar: Vec<f64>,
    pub sigbar: Vec<f64>,
    pub hbar: Vec<f64>,
    /// `(abar - sigbar sigbar^*)^{1/2}`.
    pub l: Vec<f64>,
}

impl HomogenizedValues {
    pub fn zeros(dims: Dims) -> Self {
        HomogenizedValues {
            bbar: vec![0.0; dims.m],
            abar: vec![0.0; dims.m * dims.m],
            sigbar: vec![0.0; dims.m * dims.w],
            hbar: vec![0.0; dims.d],
            l: vec![0.0; dims.m * dims.m],
        }
    }

    fn flat_len(dims: Dims) -> usize {
        dims.m + dims.m * dims.m + dims.m * dims.w + dims.d
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.bbar);
        out.extend_from_slice(&self.abar);
        out.extend_from_slice(&self.sigbar);
        out.extend_from_slice(&self.hbar);
    }

    fn read_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for part in [&mut self.bbar, &mut self.abar, &mut self.sigbar, &mut self.hbar] {
            let len = part.len();
            part.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// `abar - sigbar sigbar^*`.
    pub fn residual_diffusion(&self, m: usize, w: usize) -> Vec<f64> {
        let ss = linalg::mul_transpose(&self.sigbar, &self.sigbar, m, m, w);
        self.abar.iter().zip(ss).map(|(a, s)| a - s).collect()
    }

    fn fill_l(&mut self, m: usize, w: usize) {
        if m == 1 {
            let mut s2 = 0.0;
            for s in &self.sigbar {
                s2 += s * s;
            }
            self.l[0] = (self.abar[0] - s2).max(0.0).sqrt();
            return;
        }
        let r = self.residual_diffusion(m, w);
        self.l = linalg::psd_sqrt(m, &r, f64::INFINITY).expect("infinite tolerance always clamps");
    }
}

/// Lattice table of node averages with per-node sensor standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeTable {
    pub spec: LatticeSpec,
    pub sampler: InvariantSamplerConfig,
    pub seed: u64,
    /// `node_count x flat_len`, see [`HomogenizedValues`] field order.
    pub values: Vec<f64>,
    /// `node_count x d`.
    pub hbar_se: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Source {
    /// The slow coefficients do not depend on `z`; evaluate them directly.
    Exact(Box<MultiscaleModel>),
    ClosedForm {
        b: Field,
        a: Field,
        sigma: Field,
        h: Field,
    },
    Lattice(LatticeTable),
}

/// Averaged coefficients `bbar`, `abar`, `sigbar`, `hbar` together with the
/// correlation data the reduced filter needs.
#[derive(Debug, Clone)]
pub struct HomogenizedModel {
    dims: Dims,
    source: Source,
    alpha_t: Vec<f64>,
    gamma_perp: Vec<f64>,
    initial_x: Vec<Marginal>,
}

/// Streaming mean with a shift by the first value, so a constant sequence
/// averages to itself exactly.
#[derive(Debug, Clone, Copy, Default)]
struct ShiftedMean {
    first: f64,
    sum: f64,
    comp: f64,
    n: usize,
}

impl ShiftedMean {
    #[inline]
    fn push(&mut self, v: f64) {
        if self.n == 0 {
            self.first = v;
        }
        let d = v - self.first;
        let t = self.sum + d;
        if self.sum.abs() >= d.abs() {
            self.comp += (self.sum - t) + d;
        } else {
            self.comp += (d - t) + self.sum;
        }
        self.sum = t;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        self.first + (self.sum + self.comp) / self.n as f64
    }
}

/// Averages of `b`, `sigma sigma^*`, `sigma`, `h` over the samples.
fn average_over(model: &MultiscaleModel, samples: &InvariantSamples) -> Result<(HomogenizedValues, Vec<f64>)> {
    let dims = model.dims;
    let (m, w, d) = (dims.m, dims.w, dims.d);
    let x = &samples.x;
    let mut b = vec![0.0; m];
    let mut s = vec![0.0; m * w];
    let mut h = vec![0.0; d];
    let mut acc_b = vec![ShiftedMean::default(); m];
    let mut acc_a = vec![ShiftedMean::default(); m * m];
    let mut acc_s = vec![ShiftedMean::default(); m * w];
    let mut acc_h = vec![ShiftedMean::default(); d];
    let mut h_values = vec![Vec::with_capacity(samples.len()); d];
    for z in samples.iter() {
        model.b.eval(x, z, &mut b)?;
        model.sigma.eval(x, z, &mut s)?;
        model.h.eval(x, z, &mut h)?;
        for i in 0..m {
            acc_b[i].push(b[i]);
            for j in 0..m {
                let mut a = 0.0;
                for l in 0..w {
                    a += s[i * w + l] * s[j * w + l];
                }
                acc_a[i * m + j].push(a);
            }
        }
        for (acc, v) in acc_s.iter_mut().zip(&s) {
            acc.push(*v);
        }
        for i in 0..d {
            acc_h[i].push(h[i]);
            h_values[i].push(h[i]);
        }
    }
    let mut vals = HomogenizedValues::zeros(dims);
    for (dst, acc) in [
        (&mut vals.bbar, &acc_b),
        (&mut vals.abar, &acc_a),
        (&mut vals.sigbar, &acc_s),
        (&mut vals.hbar, &acc_h),
    ] {
        for (o, a) in dst.iter_mut().zip(acc.iter()) {
            *o = a.mean();
        }
    }
    let se = h_values.iter().map(|v| linalg::batch_means_se(v, SE_BATCHES)).collect();
    Ok((vals, se))
}

/// Certifies that `abar` is PSD and `abar - sigbar sigbar^*` is PSD within
/// [`PSD_TOL`].
fn check_node(vals: &HomogenizedValues, dims: Dims, at: &[f64]) -> Result<()> {
    let lam_a = linalg::min_eigenvalue(dims.m, &vals.abar);
    let lam_r = linalg::min_eigenvalue(dims.m, &vals.residual_diffusion(dims.m, dims.w));
    if lam_a < -PSD_TOL || lam_r < -PSD_TOL || !lam_r.is_finite() {
        return Err(Error::Check(format!(
            "averaged diffusion not PSD at x = {at:?}: min eig(abar) = {lam_a:.3e}, min eig(abar - sigbar sigbar^*) = {lam_r:.3e}"
        )));
    }
    Ok(())
}

/// Builds the homogenized model. Slow coefficients that do not depend on the
/// fast variable are used as they are; otherwise the spec selects analytic
/// averages or per-node Monte Carlo averages on a lattice.
pub fn homogenize(model: &NormalizedModel, spec: &HomogenizationSpec, seed: u64) -> Result<HomogenizedModel> {
    let mm = model.model();
    let dims = mm.dims;
    let source = if mm.is_z_free() {
        Source::Exact(Box::new(mm.clone()))
    } else {
        match spec {
            HomogenizationSpec::ClosedForm(cf) => closed_form_source(model, cf)?,
            HomogenizationSpec::Lattice { lattice, sampler } => {
                Source::Lattice(build_lattice(model, lattice, sampler, seed)?)
            }
        }
    };
    let out = HomogenizedModel {
        dims,
        source,
        alpha_t: model.alpha_t().to_vec(),
        gamma_perp: model.gamma_perp().to_vec(),
        initial_x: mm.initial_law.x.clone(),
    };
    if let Source::ClosedForm { .. } = out.source {
        out.validate_closed_form()?;
    }
    Ok(out)
}

fn closed_form_source(model: &NormalizedModel, cf: &ClosedFormSpec) -> Result<Source> {
    let dims = model.dims();
    let xonly = (dims.m, 0);
    let h = Field::from_json("hbar", &cf.hbar, dims.d, 1, xonly)?;
    let kinv = {
        let k = linalg::to_dmatrix(dims.d, dims.d, model.kappa());
        let inv = k
            .solve_lower_triangular(&nalgebra::DMatrix::identity(dims.d, dims.d))
            .ok_or_else(|| Error::Model("kappa is singular".into()))?;
        linalg::to_row_major(&inv)
    };
    let identity = linalg::to_row_major(&nalgebra::DMatrix::<f64>::identity(dims.d, dims.d));
    let h = if kinv == identity { h } else { h.premultiplied(&kinv, dims.d) };
    Ok(Source::ClosedForm {
        b: Field::from_json("bbar", &cf.bbar, dims.m, 1, xonly)?,
        a: Field::from_json("abar", &cf.abar, dims.m, dims.m, xonly)?,
        sigma: Field::from_json("sigbar", &cf.sigbar, dims.m, dims.w, xonly)?,
        h,
    })
}

fn build_lattice(
    model: &NormalizedModel,
    lattice: &LatticeSpec,
    sampler: &InvariantSamplerConfig,
    seed: u64,
) -> Result<LatticeTable> {
    let dims = model.dims();
    lattice.validate(dims.m)?;
    sampler.validate(dims.n)?;
    let nodes: Vec<(HomogenizedValues, Vec<f64>)> = (0..lattice.node_count())
        .into_par_iter()
        .map(|idx| {
            let x = lattice.node(idx);
            let samples = estimate_invariant_measure(model, &x, sampler, RngStream::new(seed, Purpose::Invariant, idx as u64))?;
            let (vals, se) = average_over(model.model(), &samples)?;
            check_node(&vals, dims, &x)?;
            Ok((vals, se))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(nodes.len() * HomogenizedValues::flat_len(dims));
    let mut hbar_se = Vec::with_capacity(nodes.len() * dims.d);
    for (v, se) in &nodes {
        v.write_flat(&mut values);
        hbar_se.extend_from_slice(se);
    }
    Ok(LatticeTable {
        spec: lattice.clone(),
        sampler: sampler.clone(),
        seed,
        values,
        hbar_se,
    })
}

impl HomogenizedModel {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn alpha_t(&self) -> &[f64] {
        &self.alpha_t
    }

    pub fn gamma_perp(&self) -> &[f64] {
        &self.gamma_perp
    }

    pub fn initial_x(&self) -> &[Marginal] {
        &self.initial_x
    }

    pub fn lattice(&self) -> Option<&LatticeTable> {
        match &self.source {
            Source::Lattice(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.source, Source::Exact(_))
    }

    /// Builds a model directly from a lattice table, e.g. one read back from
    /// a cache.
    pub fn from_lattice(model: &NormalizedModel, table: LatticeTable) -> Result<Self> {
        let dims = model.dims();
        table.spec.validate(dims.m)?;
        let expected = table.spec.node_count() * HomogenizedValues::flat_len(dims);
        if table.values.len() != expected || table.hbar_se.len() != table.spec.node_count() * dims.d {
            return Err(Error::Config("lattice table does not match the model dimensions".into()));
        }
        Ok(HomogenizedModel {
            dims,
            source: Source::Lattice(table),
            alpha_t: model.alpha_t().to_vec(),
            gamma_perp: model.gamma_perp().to_vec(),
            initial_x: model.model().initial_law.x.clone(),
        })
    }

    /// Evaluates all averaged coefficients at `x`, including `L`.
    pub fn eval(&self, x: &[f64], out: &mut HomogenizedValues) -> Result<(), EvalError> {
        let Dims { m, n, w, .. } = self.dims;
        match &self.source {
            Source::Exact(mm) => {
                let z = [0.0; 8];
                let zs: Vec<f64>;
                let z: &[f64] = if n <= z.len() {
                    &z[..n]
                } else {
                    zs = vec![0.0; n];
                    &zs
                };
                mm.b.eval(x, z, &mut out.bbar)?;
                mm.sigma.eval(x, z, &mut out.sigbar)?;
                mm.h.eval(x, z, &mut out.hbar)?;
                let a = linalg::mul_transpose(&out.sigbar, &out.sigbar, m, m, w);
                out.abar.copy_from_slice(&a);
                // abar equals sigbar sigbar^* identically here.
                out.l.iter_mut().for_each(|v| *v = 0.0);
                return Ok(());
            }
            Source::ClosedForm { b, a, sigma, h } => {
                b.eval(x, &[], &mut out.bbar)?;
                a.eval(x, &[], &mut out.abar)?;
                sigma.eval(x, &[], &mut out.sigbar)?;
                h.eval(x, &[], &mut out.hbar)?;
            }
            Source::Lattice(t) => t.interpolate(self.dims, x, out),
        }
        out.fill_l(m, w);
        Ok(())
    }

    pub fn values_at(&self, x: &[f64]) -> Result<HomogenizedValues, EvalError> {
        let mut out = HomogenizedValues::zeros(self.dims);
        self.eval(x, &mut out)?;
        Ok(out)
    }

    /// Checks a closed form for PSD consistency on a coarse sweep of
    /// `[-5, 5]^m`.
    fn validate_closed_form(&self) -> Result<()> {
        let m = self.dims.m;
        let per = if m == 1 { 101 } else { 11 };
        let spec = LatticeSpec {
            lower: vec![-5.0; m],
            upper: vec![5.0; m],
            nodes: vec![per; m],
        };
        let mut out = HomogenizedValues::zeros(self.dims);
        for idx in 0..spec.node_count() {
            let x = spec.node(idx);
            self.eval(&x, &mut out)?;
            check_node(&out, self.dims, &x)?;
        }
        Ok(())
    }
}

impl LatticeTable {
    /// Multilinear interpolation, clamped to the lattice box.
    fn interpolate(&self, dims: Dims, x: &[f64], out: &mut HomogenizedValues) {
        let m = dims.m;
        let len = HomogenizedValues::flat_len(dims);
        let spec = &self.spec;
        if m == 1 {
            let (i, t) = cell(spec, 0, x[0]);
            let a = &self.values[i * len..(i + 1) * len];
            if t == 0.0 {
                out.read_flat(a);
            } else {
                let b = &self.values[(i + 1) * len..(i + 2) * len];
                let mixed: smallvec::SmallVec<[f64; 8]> = a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect();
                out.read_flat(&mixed);
            }
            return;
        }
        let cells: Vec<(usize, f64)> = (0..m).map(|i| cell(spec, i, x[i])).collect();
        let mut flat = vec![0.0; len];
        for corner in 0..(1usize << m) {
            let mut weight = 1.0;
            let mut idx = 0usize;
            for i in 0..m {
                let (c, t) = cells[i];
                let up = (corner >> i) & 1 == 1;
                if up && t == 0.0 {
                    weight = 0.0;
                    break;
                }
                weight *= if up { t } else { 1.0 - t };
                idx = idx * spec.nodes[i] + c + usize::from(up);
            }
            if weight == 0.0 {
                continue;
            }
            for (f, v) in flat.iter_mut().zip(&self.values[idx * len..(idx + 1) * len]) {
                *f += weight * v;
            }
        }
        out.read_flat(&flat);
    }

    pub fn node_values(&self, dims: Dims, idx: usize) -> HomogenizedValues {
        let len = HomogenizedValues::flat_len(dims);
        let mut v = HomogenizedValues::zeros(dims);
        v.read_flat(&self.values[idx * len..(idx + 1) * len]);
        v.fill_l(dims.m, dims.w);
        v
    }

    /// Writes `x1..xm,bbar..,abar..,sigbar..,hbar..` rows and a metadata file.
    pub fn write_cache(&self, dims: Dims, csv: &std::path::Path, meta: &std::path::Path) -> Result<()> {
        use std::fmt::Write as _;
        let Dims { m, w, d, .. } = dims;
        let mut header: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
        header.extend((1..=m).map(|i| format!("bbar{i}")));
        for i in 1..=m {
            header.extend((1..=m).map(|j| format!("abar{i}{j}")));
        }
        for i in 1..=m {
            header.extend((1..=w).map(|j| format!("sigbar{i}{j}")));
        }
        header.extend((1..=d).map(|i| format!("hbar{i}")));
        let mut s = header.join(",");
        s.push('\n');
        let len = HomogenizedValues::flat_len(dims);
        for idx in 0..self.spec.node_count() {
            let x = self.spec.node(idx);
            let row: Vec<String> = x
                .iter()
                .chain(&self.values[idx * len..(idx + 1) * len])
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        std::fs::write(csv, s).map_err(|e| Error::io(csv, e))?;
        let metadata = CacheMetadata {
            dims,
            lattice: self.spec.clone(),
            sampler: self.sampler.clone(),
            seed: self.seed,
            hbar_se: self.hbar_se.clone(),
        };
        let text = serde_json::to_string_pretty(&metadata).map_err(|source| Error::Json {
            context: "cache metadata".into(),
            source,
        })?;
        std::fs::write(meta, text).map_err(|e| Error::io(meta, e))
    }

    pub fn read_cache(csv: &std::path::Path, meta: &std::path::Path) -> Result<(Dims, Self)> {
        let text = std::fs::read_to_string(meta).map_err(|e| Error::io(meta, e))?;
        let md: CacheMetadata = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: format!("{}", meta.display()),
            source,
        })?;
        let body = std::fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
        let m = md.dims.m;
        let mut values = Vec::new();
        for (ln, line) in body.lines().enumerate().skip(1) {
            for (col, field) in line.split(',').enumerate().skip(m) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{}:{}: bad number in column {}", csv.display(), ln + 1, col + 1)))?;
                values.push(v);
            }
        }
        Ok((
            md.dims,
            LatticeTable {
                spec: md.lattice,
                sampler: md.sampler,
                seed: md.seed,
                values,
                hbar_se: md.hbar_se,
            },
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMetadata {
    dims: Dims,
    lattice: LatticeSpec,
    sampler: InvariantSamplerConfig,
    seed: u64,
    hbar_se: Vec<f64>,
}

/// Cell index and local coordinate in `[0, 1)` along coordinate `i`.
#[inline]
fn cell(spec: &LatticeSpec, i: usize, x: f64) -> (usize, f64) {
    let count = spec.nodes[i];
    if count == 1 {
        return (0, 0.0);
    }
    let (lo, hi) = (spec.lower[i], spec.upper[i]);
    if !(x > lo) {
        return (0, 0.0);
    }
    if x >= hi {
        return (count - 1, 0.0);
    }
    let s = (x - lo) / (hi - lo) * (count - 1) as f64;
    let c = (s.floor() as usize).min(count - 2);
    (c, s - c as f64)
}

/// Residual `|mean_i theta(x, z_i) - theta_bar|` per component, with the
/// batch-means standard error of the sample mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenteringResidual {
    pub residual: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl CenteringResidual {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn centering_check(theta: &Field, theta_bar: &[f64], samples: &InvariantSamples) -> Result<CenteringResidual> {
    let len = theta.len();
    if theta_bar.len() != len {
        return Err(Error::Config("centering check: averaged value has the wrong length".into()));
    }
    let mut buf = vec![0.0; len];
    let mut acc = vec![ShiftedMean::default(); len];
    let mut cols = vec![Vec::with_capacity(samples.len()); len];
    for z in samples.iter() {
        theta.eval(&samples.x, z, &mut buf)?;
        for i in 0..len {
            acc[i].push(buf[i]);
            cols[i].push(buf[i]);
        }
    }
    Ok(CenteringResidual {
        residual: acc.iter().zip(theta_bar).map(|(a, t)| (a.mean() - t).abs()).collect(),
        stderr: cols.iter().map(|c| linalg::batch_means_se(c, SE_BATCHES)).collect(),
    })
}

/// Averages of the model coefficients over a sample set, as used for the
/// lattice nodes.
pub fn average_samples(model: &NormalizedModel, samples: &InvariantSamples) -> Result<HomogenizedValues> {
    let (mut v, _) = average_over(model.model(), samples)?;
    v.fill_l(model.dims().m, model.dims().w);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::invariant::tests::ou_cfg;
    use crate::model::normalize_correlation;
    use serde_json::json;

    fn model(b: &str, sigma: &str, h: &str) -> NormalizedModel {
        let mut m = crate::model::tests::scalar_model(0.0, 1.0);
        m.b = Field::parse(1, 1, (1, 1), &[b]).unwrap();
        m.sigma = Field::parse(1, 1, (1, 1), &[sigma]).unwrap();
        m.h = Field::parse(1, 1, (1, 1), &[h]).unwrap();
        normalize_correlation(&m).unwrap()
    }

    fn lattice_spec(retained: usize) -> HomogenizationSpec {
        HomogenizationSpec::Lattice {
            lattice: LatticeSpec {
                lower: vec![-2.0],
                upper: vec![2.0],
                nodes: vec![5],
            },
            sampler: ou_cfg(retained),
        }
    }

    #[test]
    fn z_free_coefficients_are_reproduced_exactly() {
        let nm = model("-x1 + sin(x1)", "1 + 0.5*tanh(x1)", "tanh(x1)");
        let hm = homogenize(&nm, &lattice_spec(10), 0).unwrap();
        assert!(hm.is_exact());
        for &x in &[-1.3, 0.0, 0.7] {
            let v = hm.values_at(&[x]).unwrap();
            assert_eq!(v.bbar[0], -x + x.sin());
            assert_eq!(v.sigbar[0], 1.0 + 0.5 * x.tanh());
            assert_eq!(v.hbar[0], x.tanh());
            assert_eq!(v.l[0], 0.0);
        }
    }

    #[test]
    fn lattice_average_of_z_free_field_is_exact_at_nodes() {
        // Only h depends on z; b and sigma are z-free and must average to
        // themselves exactly.
        let nm = model("-x1", "2", "x1 + z1");
        let hm = homogenize(&nm, &lattice_spec(2000), 1).unwrap();
        let t = hm.lattice().unwrap();
        for idx in 0..5 {
            let x = t.spec.node(idx);
            let v = t.node_values(nm.dims(), idx);
            assert_eq!(v.bbar[0], -x[0]);
            assert_eq!(v.sigbar[0], 2.0);
            assert_eq!(v.abar[0], 4.0);
            assert_eq!(v.l[0], 0.0);
        }
    }

    #[test]
    fn sensor_average_with_symmetric_fast_law() {
        let nm = model("-x1", "1", "x1 + z1");
        let hm = homogenize(&nm, &lattice_spec(20_000), 2).unwrap();
        let t = hm.lattice().unwrap();
        for idx in 0..5 {
            let x = t.spec.node(idx)[0];
            let v = t.node_values(nm.dims(), idx);
            assert!((v.hbar[0] - x).abs() <= 3.0 * t.hbar_se[idx], "node {idx}: {} vs {x}", v.hbar[0]);
        }
    }

    #[test]
    fn state_dependent_diffusion_matches_quadrature() {
        // sigma = sqrt(1 + z^2/2) with z ~ N(0, 1): abar = 1.5 and sigbar is
        // the Gauss-Hermite average of sqrt(1 + z^2/2).
        let nm = model("-x1", "sqrt(1 + z1*z1/2)", "tanh(x1)");
        let cfg = InvariantSamplerConfig {
            dt: 0.002,
            thinning: 100,
            ..ou_cfg(40_000)
        };
        let samples = estimate_invariant_measure(&nm, &[0.0], &cfg, RngStream::new(3, Purpose::Invariant, 0)).unwrap();
        let v = average_samples(&nm, &samples).unwrap();
        let sigbar_exact = gauss_hermite_expectation(|z| (1.0 + z * z / 2.0).sqrt());
        let abar_exact = 1.5;
        let sq: Vec<f64> = samples.iter().map(|z| 1.0 + z[0] * z[0] / 2.0).collect();
        let se_a = linalg::batch_means_se(&sq, 20);
        let sg: Vec<f64> = samples.iter().map(|z| (1.0 + z[0] * z[0] / 2.0).sqrt()).collect();
        let se_s = linalg::batch_means_se(&sg, 20);
        // Euler at fast step 0.002 inflates the variance by 1/(1 - 0.001).
        assert!((v.abar[0] - abar_exact).abs() <= 3.0 * se_a + 1e-3, "{} vs {abar_exact}", v.abar[0]);
        assert!((v.sigbar[0] - sigbar_exact).abs() <= 3.0 * se_s + 1e-3, "{} vs {sigbar_exact}", v.sigbar[0]);
        assert!(v.abar[0] - v.sigbar[0] * v.sigbar[0] > 0.0);
        assert!(v.l[0] > 0.0);
    }

    /// `E f(Z)` for `Z ~ N(0,1)` by 40-point Gauss-Hermite quadrature
    /// (Golub-Welsch on the probabilists' Jacobi matrix).
    fn gauss_hermite_expectation(f: impl Fn(f64) -> f64) -> f64 {
        let n = 40;
        let mut j = nalgebra::DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            j[(k - 1, k)] = off;
            j[(k, k - 1)] = off;
        }
        let eig = j.symmetric_eigen();
        (0..n)
            .map(|i| eig.eigenvectors[(0, i)].powi(2) * f(eig.eigenvalues[i]))
            .sum()
    }

    #[test]
    fn quadrature_oracle_is_sane() {
        assert!((gauss_hermite_expectation(|z| z * z) - 1.0).abs() < 1e-12);
        assert!((gauss_hermite_expectation(|z| z.powi(4)) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn centering_residuals() {
        let nm = model("-x1", "1", "x1 + z1");
        let samples = estimate_invariant_measure(&nm, &[0.5], &ou_cfg(20_000), RngStream::new(4, Purpose::Invariant, 0)).unwrap();
        let own = average_samples(&nm, &samples).unwrap();
        let self_check = centering_check(&nm.model().h, &own.hbar, &samples).unwrap();
        assert_eq!(self_check.max_residual(), 0.0);

        let other = estimate_invariant_measure(&nm, &[0.5], &ou_cfg(20_000), RngStream::new(5, Purpose::Invariant, 0)).unwrap();
        let indep = average_samples(&nm, &other).unwrap();
        let cross = centering_check(&nm.model().h, &indep.hbar, &samples).unwrap();
        let other_se = centering_check(&nm.model().h, &indep.hbar, &other).unwrap().stderr[0];
        let combined = (cross.stderr[0].powi(2) + other_se.powi(2)).sqrt();
        assert!(cross.residual[0] <= 3.0 * combined);

        let constant = centering_check(&nm.model().b, &[-0.5], &samples).unwrap();
        assert_eq!(constant.max_residual(), 0.0);
    }

    #[test]
    fn closed_form_override_and_psd_rejection() {
        let nm = model("-x1 + 0.5*z1", "1", "tanh(x1) + 0.5*z1");
        let cf = ClosedFormSpec {
            bbar: json!(["-x1"]),
            abar: json!([["1"]]),
            sigbar: json!([["1"]]),
            hbar: json!(["tanh(x1)"]),
        };
        let hm = homogenize(&nm, &HomogenizationSpec::ClosedForm(cf.clone()), 0).unwrap();
        let v = hm.values_at(&[0.3]).unwrap();
        assert_eq!(v.bbar[0], -0.3);
        assert_eq!(v.l[0], 0.0);
        let bad = ClosedFormSpec {
            abar: json!([["0.5"]]),
            ..cf
        };
        assert!(matches!(
            homogenize(&nm, &HomogenizationSpec::ClosedForm(bad), 0),
            Err(Error::Check(_))
        ));
    }

    #[test]
    fn interpolation_is_linear_between_nodes_and_clamped() {
        let nm = model("-x1", "1", "x1 + z1");
        let hm = homogenize(&nm, &lattice_spec(200), 7).unwrap();
        let t = hm.lattice().unwrap();
        let a = t.node_values(nm.dims(), 1).hbar[0];
        let b = t.node_values(nm.dims(), 2).hbar[0];
        let mid = hm.values_at(&[-0.25]).unwrap().hbar[0];
        assert!((mid - (0.25 * a + 0.75 * b)).abs() < 1e-14);
        let lo = t.node_values(nm.dims(), 0).hbar[0];
        assert_eq!(hm.values_at(&[-10.0]).unwrap().hbar[0], lo);
    }

    #[test]
    fn cache_roundtrip() {
        let nm = model("-x1", "1", "x1 + z1");
        let hm = homogenize(&nm, &lattice_spec(100), 8).unwrap();
        let t = hm.lattice().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (c, m) = (dir.path().join("h.csv"), dir.path().join("h.json"));
        t.write_cache(nm.dims(), &c, &m).unwrap();
        let (dims, back) = LatticeTable::read_cache(&c, &m).unwrap();
        assert_eq!(dims, nm.dims());
        assert_eq!(&back, t);
    }
}
