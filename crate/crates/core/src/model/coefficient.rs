//! Vector and matrix valued coefficient fields `(x, z) -> R^{rows x cols}`.

use serde_json::Value;
use smallvec::SmallVec;

use super::expr::{parse_expression, CoefficientExpr, EvalError};
use crate::error::{Error, Result};

/// Built-in parametric families. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    /// A constant vector or matrix.
    Constant { value: Vec<f64> },
    /// `A x + B z + c` (vector fields only). Unbounded unless `A = B = 0`.
    Linear {
        x: Vec<f64>,
        z: Vec<f64>,
        c: Vec<f64>,
    },
    /// Ornstein-Uhlenbeck drift `-theta (z - mean - C x)` for the fast drift.
    Ou {
        theta: f64,
        mean: Vec<f64>,
        coupling: Vec<f64>,
    },
    /// `scale_i * tanh((A x + B z + c)_i)`.
    Tanh {
        scale: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        c: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Exprs(Vec<CoefficientExpr>),
    Builtin(Builtin),
}

/// A coefficient function with a fixed output shape, optionally premultiplied
/// by a constant matrix (used for the `kappa^{-1} h` substitution).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    rows: usize,
    cols: usize,
    m: usize,
    n: usize,
    source: Source,
    /// `rows x inner_rows` premultiplier.
    left: Option<Vec<f64>>,
    inner_rows: usize,
}

impl Field {
    pub fn from_exprs(rows: usize, cols: usize, dims: (usize, usize), exprs: Vec<CoefficientExpr>) -> Self {
        assert_eq!(exprs.len(), rows * cols, "expression count must match shape");
        Field {
            rows,
            cols,
            m: dims.0,
            n: dims.1,
            source: Source::Exprs(exprs),
            left: None,
            inner_rows: rows,
        }
    }

    /// Parse a row-major list of DSL strings.
    pub fn parse(rows: usize, cols: usize, dims: (usize, usize), texts: &[&str]) -> Result<Self> {
        if texts.len() != rows * cols {
            return Err(Error::Model(format!(
                "expected {} entries for a {rows}x{cols} coefficient, got {}",
                rows * cols,
                texts.len()
            )));
        }
        let exprs = texts
            .iter()
            .map(|t| {
                parse_expression(t, dims).map_err(|source| Error::Parse {
                    field: (*t).to_string(),
                    source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_exprs(rows, cols, dims, exprs))
    }

    pub fn builtin(rows: usize, cols: usize, dims: (usize, usize), b: Builtin) -> Result<Self> {
        let (m, n) = dims;
        let check = |name: &str, v: &[f64], len: usize| -> Result<()> {
            if v.len() != len {
                return Err(Error::Model(format!(
                    "builtin parameter `{name}` has {} entries, expected {len}",
                    v.len()
                )));
            }
            Ok(())
        };
        match &b {
            Builtin::Constant { value } => check("value", value, rows * cols)?,
            Builtin::Linear { x, z, c } | Builtin::Tanh { x, z, c, .. } => {
                if cols != 1 {
                    return Err(Error::Model("linear/tanh builtins are vector valued".into()));
                }
                check("x", x, rows * m)?;
                check("z", z, rows * n)?;
                check("c", c, rows)?;
                if let Builtin::Tanh { scale, .. } = &b {
                    check("scale", scale, rows)?;
                }
            }
            Builtin::Ou {
                theta,
                mean,
                coupling,
            } => {
                if cols != 1 || rows != n {
                    return Err(Error::Model("the ou builtin describes the fast drift (n x 1)".into()));
                }
                if !(*theta > 0.0) {
                    return Err(Error::Model("ou theta must be positive".into()));
                }
                check("mean", mean, n)?;
                check("coupling", coupling, n * m)?;
            }
        }
        Ok(Field {
            rows,
            cols,
            m,
            n,
            source: Source::Builtin(b),
            left: None,
            inner_rows: rows,
        })
    }

    pub fn constant(rows: usize, cols: usize, dims: (usize, usize), value: Vec<f64>) -> Self {
        Self::builtin(rows, cols, dims, Builtin::Constant { value }).expect("shape checked by caller")
    }

    pub fn zeros(rows: usize, cols: usize, dims: (usize, usize)) -> Self {
        Self::constant(rows, cols, dims, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns `L * self` for a constant `rows' x rows` matrix `L`.
    pub fn premultiplied(&self, mat: &[f64], out_rows: usize) -> Field {
        assert_eq!(self.cols, 1, "premultiplication is defined for vector fields");
        assert_eq!(mat.len(), out_rows * self.rows);
        let left = match &self.left {
            None => mat.to_vec(),
            Some(prev) => {
                let mut c = vec![0.0; out_rows * self.inner_rows];
                for i in 0..out_rows {
                    for k in 0..self.rows {
                        let a = mat[i * self.rows + k];
                        for j in 0..self.inner_rows {
                            c[i * self.inner_rows + j] += a * prev[k * self.inner_rows + j];
                        }
                    }
                }
                c
            }
        };
        Field {
            rows: out_rows,
            left: Some(left),
            ..self.clone()
        }
    }

    pub fn depends_on_z(&self) -> bool {
        match &self.source {
            Source::Exprs(es) => es.iter().any(|e| e.depends_on_z()),
            Source::Builtin(Builtin::Constant { .. }) => false,
            Source::Builtin(Builtin::Linear { z, .. }) | Source::Builtin(Builtin::Tanh { z, .. }) => {
                z.iter().any(|&v| v != 0.0)
            }
            Source::Builtin(Builtin::Ou { .. }) => true,
        }
    }

    /// True for the linear family with a non-zero state coefficient.
    pub fn is_unbounded_linear(&self) -> bool {
        match &self.source {
            Source::Builtin(Builtin::Linear { x, z, .. }) => x.iter().chain(z).any(|&v| v != 0.0),
            _ => false,
        }
    }

    /// Affine representation `A x + B z + c` (after premultiplication) for
    /// constant and linear builtins and for expressions that read no state.
    /// Matrices are row-major with `rows*cols` output entries.
    pub fn affine_parts(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (m, n) = (self.m, self.n);
        let entries = self.inner_rows * self.cols;
        let (ax, bz, c) = match &self.source {
            Source::Builtin(Builtin::Constant { value }) => (vec![0.0; entries * m], vec![0.0; entries * n], value.clone()),
            Source::Builtin(Builtin::Linear { x, z, c }) => (x.clone(), z.clone(), c.clone()),
            Source::Exprs(es) if es.iter().all(|e| e.is_state_free()) => {
                let c = es.iter().map(|e| e.eval(&[], &[]).ok()).collect::<Option<Vec<f64>>>()?;
                (vec![0.0; entries * m], vec![0.0; entries * n], c)
            }
            _ => return None,
        };
        match &self.left {
            None => Some((ax, bz, c)),
            Some(l) => {
                let apply = |src: &[f64], width: usize| {
                    let mut out = vec![0.0; self.rows * width];
                    for i in 0..self.rows {
                        for k in 0..self.inner_rows {
                            let a = l[i * self.inner_rows + k];
                            for j in 0..width {
                                out[i * width + j] += a * src[k * width + j];
                            }
                        }
                    }
                    out
                };
                Some((apply(&ax, m), apply(&bz, n), apply(&c, 1)))
            }
        }
    }

    /// Evaluate into `out` (row-major, `rows*cols`).
    #[inline]
    pub fn eval(&self, x: &[f64], z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(out.len(), self.rows * self.cols);
        match &self.left {
            None => self.eval_inner(x, z, out),
            Some(l) => {
                let mut inner: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, self.inner_rows);
                self.eval_inner(x, z, &mut inner)?;
                for i in 0..self.rows {
                    let mut acc = 0.0;
                    for k in 0..self.inner_rows {
                        acc += l[i * self.inner_rows + k] * inner[k];
                    }
                    out[i] = acc;
                }
                Ok(())
            }
        }
    }

    fn eval_inner(&self, x: &[f64], z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        match &self.source {
            Source::Exprs(es) => {
                for (o, e) in out.iter_mut().zip(es) {
                    *o = e.eval(x, z)?;
                }
            }
            Source::Builtin(b) => match b {
                Builtin::Constant { value } => out.copy_from_slice(value),
                Builtin::Linear { x: a, z: bz, c } => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = affine_row(i, a, bz, c, x, z);
                    }
                }
                Builtin::Tanh { scale, x: a, z: bz, c } => {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = scale[i] * affine_row(i, a, bz, c, x, z).tanh();
                    }
                }
                Builtin::Ou {
                    theta,
                    mean,
                    coupling,
                } => {
                    let m = x.len();
                    for (i, o) in out.iter_mut().enumerate() {
                        let mut target = mean[i];
                        for j in 0..m {
                            target += coupling[i * m + j] * x[j];
                        }
                        *o = -theta * (z[i] - target);
                    }
                }
            },
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::Domain {
                op: "builtin",
                detail: "non-finite coefficient value".into(),
            });
        }
        Ok(())
    }

    /// Build a field from its JSON model-file representation: a DSL string, a
    /// number, an array (vector) or array of arrays (matrix) of those, or a
    /// `{"builtin": name, "params": {...}}` object.
    pub fn from_json(name: &str, value: &Value, rows: usize, cols: usize, dims: (usize, usize)) -> Result<Self> {
        if let Value::Object(map) = value {
            return builtin_from_json(name, map, rows, cols, dims);
        }
        let flat = flatten_entries(name, value, rows, cols)?;
        let exprs = flat
            .into_iter()
            .map(|entry| match entry {
                Entry::Num(v) => Ok(CoefficientExpr::constant(v)),
                Entry::Text(t) => parse_expression(&t, dims).map_err(|source| Error::Parse {
                    field: format!("{name}: {t}"),
                    source,
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_exprs(rows, cols, dims, exprs))
    }
}

#[inline]
fn affine_row(i: usize, a: &[f64], bz: &[f64], c: &[f64], x: &[f64], z: &[f64]) -> f64 {
    let (m, n) = (x.len(), z.len());
    let mut acc = c[i];
    for j in 0..m {
        acc += a[i * m + j] * x[j];
    }
    for j in 0..n {
        acc += bz[i * n + j] * z[j];
    }
    acc
}

enum Entry {
    Num(f64),
    Text(String),
}

fn scalar_entry(name: &str, v: &Value) -> Result<Entry> {
    match v {
        Value::String(s) => Ok(Entry::Text(s.clone())),
        Value::Number(num) => num
            .as_f64()
            .map(Entry::Num)
            .ok_or_else(|| Error::Model(format!("`{name}`: invalid number"))),
        other => Err(Error::Model(format!(
            "`{name}`: expected an expression string or number, got {other}"
        ))),
    }
}

fn flatten_entries(name: &str, value: &Value, rows: usize, cols: usize) -> Result<Vec<Entry>> {
    let shape_err = || Error::Model(format!("`{name}` must have shape {rows}x{cols}"));
    match value {
        Value::Array(items) if cols == 1 && items.iter().all(|v| !v.is_array()) => {
            if items.len() != rows {
                return Err(shape_err());
            }
            items.iter().map(|v| scalar_entry(name, v)).collect()
        }
        Value::Array(items) => {
            if items.len() != rows {
                return Err(shape_err());
            }
            let mut out = Vec::with_capacity(rows * cols);
            for row in items {
                let row = row.as_array().ok_or_else(shape_err)?;
                if row.len() != cols {
                    return Err(shape_err());
                }
                for v in row {
                    out.push(scalar_entry(name, v)?);
                }
            }
            Ok(out)
        }
        scalar if rows * cols == 1 => Ok(vec![scalar_entry(name, scalar)?]),
        _ => Err(shape_err()),
    }
}

/// Parse a numeric vector or matrix (row-major) of an expected length.
pub(crate) fn numbers(name: &str, value: &Value, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    fn walk(v: &Value, out: &mut Vec<f64>) -> bool {
        match v {
            Value::Number(n) => {
                out.push(n.as_f64().unwrap_or(f64::NAN));
                true
            }
            Value::Array(items) => items.iter().all(|i| walk(i, out)),
            _ => false,
        }
    }
    if !walk(value, &mut out) || out.len() != len || out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!("`{name}` must hold {len} finite numbers")));
    }
    Ok(out)
}

fn builtin_from_json(
    name: &str,
    map: &serde_json::Map<String, Value>,
    rows: usize,
    cols: usize,
    dims: (usize, usize),
) -> Result<Field> {
    for key in map.keys() {
        if key != "builtin" && key != "params" {
            return Err(Error::Model(format!("`{name}`: unknown key `{key}`")));
        }
    }
    let kind = map
        .get("builtin")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Model(format!("`{name}`: builtin object needs a string `builtin`")))?;
    let empty = serde_json::Map::new();
    let params = match map.get("params") {
        None => &empty,
        Some(Value::Object(p)) => p,
        Some(_) => return Err(Error::Model(format!("`{name}`: `params` must be an object"))),
    };
    let (m, n) = dims;
    let allowed: &[&str] = match kind {
        "constant" => &["value"],
        "linear" => &["x", "z", "c"],
        "ou" => &["theta", "mean", "coupling"],
        "tanh" => &["scale", "x", "z", "c"],
        other => return Err(Error::Model(format!("`{name}`: unknown builtin `{other}`"))),
    };
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Model(format!("`{name}`: unknown parameter `{key}` for `{kind}`")));
        }
    }
    let get = |key: &str, len: usize, default: f64| -> Result<Vec<f64>> {
        match params.get(key) {
            None => Ok(vec![default; len]),
            Some(v) => numbers(&format!("{name}.{key}"), v, len),
        }
    };
    let b = match kind {
        "constant" => Builtin::Constant {
            value: match params.get("value") {
                Some(v) => numbers(&format!("{name}.value"), v, rows * cols)?,
                None => return Err(Error::Model(format!("`{name}`: constant needs `value`"))),
            },
        },
        "linear" => Builtin::Linear {
            x: get("x", rows * m, 0.0)?,
            z: get("z", rows * n, 0.0)?,
            c: get("c", rows, 0.0)?,
        },
        "ou" => Builtin::Ou {
            theta: get("theta", 1, 1.0)?[0],
            mean: get("mean", n, 0.0)?,
            coupling: get("coupling", n * m, 0.0)?,
        },
        "tanh" => Builtin::Tanh {
            scale: get("scale", rows, 1.0)?,
            x: get("x", rows * m, 0.0)?,
            z: get("z", rows * n, 0.0)?,
            c: get("c", rows, 0.0)?,
        },
        _ => unreachable!(),
    };
    Field::builtin(rows, cols, dims, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dsl_matrix_field() {
        let f = Field::from_json("g", &json!([["sqrt(2)", 0], [0, "1 + z2^2"]]), 2, 2, (1, 2)).unwrap();
        let mut out = [0.0; 4];
        f.eval(&[0.0], &[0.0, 2.0], &mut out).unwrap();
        assert_eq!(out, [2f64.sqrt(), 0.0, 0.0, 5.0]);
        assert!(f.depends_on_z());
    }

    #[test]
    fn builtin_families() {
        let lin = Field::from_json(
            "b",
            &json!({"builtin": "linear", "params": {"x": [[-1.0]], "z": [[0.5]]}}),
            1,
            1,
            (1, 1),
        )
        .unwrap();
        let mut out = [0.0];
        lin.eval(&[2.0], &[1.0], &mut out).unwrap();
        assert_eq!(out[0], -1.5);
        assert!(lin.is_unbounded_linear());

        let ou = Field::from_json(
            "f",
            &json!({"builtin": "ou", "params": {"theta": 2.0, "coupling": [[1.0]]}}),
            1,
            1,
            (1, 1),
        )
        .unwrap();
        ou.eval(&[0.5], &[1.5], &mut out).unwrap();
        assert_eq!(out[0], -2.0);

        let th = Field::from_json(
            "h",
            &json!({"builtin": "tanh", "params": {"scale": [2.0], "x": [[1.0]]}}),
            1,
            1,
            (1, 1),
        )
        .unwrap();
        th.eval(&[0.0], &[7.0], &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        assert!(!th.depends_on_z());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        assert!(Field::from_json("b", &json!({"builtin": "linear", "extra": 1}), 1, 1, (1, 1)).is_err());
        assert!(Field::from_json("b", &json!({"builtin": "linear", "params": {"q": 1}}), 1, 1, (1, 1)).is_err());
        assert!(Field::from_json("b", &json!({"builtin": "spline"}), 1, 1, (1, 1)).is_err());
        assert!(Field::from_json("b", &json!(["x1", "x1"]), 1, 1, (1, 1)).is_err());
        assert!(Field::from_json("b", &json!(["w1"]), 1, 1, (1, 1)).is_err());
    }

    #[test]
    fn premultiplied_field_and_affine_parts() {
        let h = Field::from_json(
            "h",
            &json!({"builtin": "linear", "params": {"x": [[1.0], [2.0]], "c": [1.0, 0.0]}}),
            2,
            1,
            (1, 1),
        )
        .unwrap();
        let scaled = h.premultiplied(&[2.0, 0.0, 1.0, 1.0], 2);
        let mut out = [0.0; 2];
        scaled.eval(&[1.0], &[0.0], &mut out).unwrap();
        assert_eq!(out, [4.0, 4.0]);
        let (a, b, c) = scaled.affine_parts().unwrap();
        assert_eq!(a, vec![2.0, 3.0]);
        assert_eq!(b, vec![0.0, 0.0]);
        assert_eq!(c, vec![2.0, 1.0]);
    }
}
