//! Explicit backward sweeps for the dual equations of the full and the
//! homogenized filter, with slow and fast state each one-dimensional.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{central, extrapolate_edges, Axis, GridFunction};
use crate::averaging::{HomogenizedModel, HomogenizedValues};
use crate::error::{Error, Result};
use crate::model::{Dims, NormalizedModel, TestFunction};
use crate::simulate::ObservationPath;

/// Stability numbers of an explicit sweep. Both must stay at or below 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stability {
    /// `dt * max(a / dx^2 + |b| / dx)` for the slow part.
    pub slow_courant: f64,
    /// Same quantity for one fast substep, in fast time; 0 without a fast axis.
    pub fast_courant: f64,
    pub fast_substeps: usize,
}

#[derive(Debug, Clone)]
pub struct DualSolveResult {
    /// Snapshots ordered by time, including `t = 0` and `t = T`.
    pub snapshots: Vec<GridFunction>,
    pub snapshot_steps: Vec<usize>,
    pub stability: Stability,
    /// Observation increments the sweep consumed.
    pub dy: Vec<f64>,
}

impl DualSolveResult {
    pub fn at_step(&self, k: usize) -> Option<&GridFunction> {
        self.snapshot_steps.binary_search(&k).ok().map(|i| &self.snapshots[i])
    }

    pub fn initial(&self) -> &GridFunction {
        &self.snapshots[0]
    }

    /// Snapshot CSV `t,x[,z],v`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let two_d = self.snapshots.first().is_some_and(|g| g.z.is_some());
        let mut s = String::from(if two_d { "t,x,z,v\n" } else { "t,x,v\n" });
        for g in &self.snapshots {
            let nz = g.nz();
            for i in 0..g.x.points {
                for j in 0..nz {
                    let _ = write!(s, "{:.16e},{:.16e}", g.t, g.x.coord(i));
                    if let Some(z) = g.z {
                        let _ = write!(s, ",{:.16e}", z.coord(j));
                    }
                    let _ = writeln!(s, ",{:.16e}", g.at_node(i, j));
                }
            }
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Options for the full dual sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullDualOptions {
    /// Keep every `snapshot_stride`-th step (the first and last always).
    pub snapshot_stride: usize,
    /// Upper bound on `nodes * steps * (substeps + 1)`.
    pub max_work: f64,
}

impl Default for FullDualOptions {
    fn default() -> Self {
        FullDualOptions {
            snapshot_stride: 1,
            max_work: 2e10,
        }
    }
}

fn require_scalar_slow(dims: Dims) -> Result<()> {
    if dims.m != 1 {
        return Err(Error::Config(format!("the dual solvers need a one-dimensional slow state, got m = {}", dims.m)));
    }
    Ok(())
}

fn unstable(what: &str, courant: f64, dt: f64) -> Error {
    Error::abort(
        0,
        format!(
            "{what} explicit scheme is unstable (Courant number {courant:.3}); use a time step below {:.3e}",
            0.9 * dt / courant
        ),
    )
}

/// Solves the averaged dual backward from `v_T = phi`:
/// `v_k = v_{k+1} + Gbar v_{k+1} dt + <v_{k+1} hbar + alpha sigbar^* dv_{k+1}/dx, dY_k>`,
/// keeping every step.
pub fn solve_averaged_dual(homog: &HomogenizedModel, phi: &TestFunction, obs: &ObservationPath, x: Axis) -> Result<DualSolveResult> {
    x.validate()?;
    let terminal = (0..x.points).map(|i| phi.value(&[x.coord(i)])).collect();
    averaged_sweep(homog, obs, x, terminal)
}

/// The averaged sweep from arbitrary terminal values on the grid.
pub(crate) fn averaged_sweep(homog: &HomogenizedModel, obs: &ObservationPath, x: Axis, terminal: Vec<f64>) -> Result<DualSolveResult> {
    let dims = homog.dims();
    require_scalar_slow(dims)?;
    x.validate()?;
    if terminal.len() != x.points {
        return Err(Error::Config("terminal values do not match the grid".into()));
    }
    if obs.d != dims.d {
        return Err(Error::Config("observation dimension does not match the model".into()));
    }
    let (d, w) = (dims.d, dims.w);
    let nx = x.points;
    let dx = x.pitch();
    let dt = obs.grid.dt;
    let at = homog.alpha_t();

    let mut b = vec![0.0; nx];
    let mut a = vec![0.0; nx];
    let mut h = vec![0.0; nx * d];
    let mut c = vec![0.0; nx * d];
    let mut vals = HomogenizedValues::zeros(dims);
    let mut courant = 0.0f64;
    for i in 0..nx {
        homog.eval(&[x.coord(i)], &mut vals)?;
        b[i] = vals.bbar[0];
        a[i] = vals.abar[0];
        for l in 0..d {
            h[i * d + l] = vals.hbar[l];
            c[i * d + l] = (0..w).map(|j| at[j * d + l] * vals.sigbar[j]).sum();
        }
        courant = courant.max(dt * (a[i].max(0.0) / (dx * dx) + b[i].abs() / dx));
    }
    if courant > 1.0 {
        return Err(unstable("averaged dual", courant, dt));
    }

    let steps = obs.grid.steps;
    let mut v = terminal;
    let mut snaps = vec![GridFunction {
        x,
        z: None,
        t: obs.grid.time(steps),
        values: v.clone(),
    }];
    let mut next = v.clone();
    for k in (0..steps).rev() {
        let dy = obs.increment(k);
        for i in 1..nx - 1 {
            let (d1, d2) = central(&v, i, 1, dx);
            let mut acc = v[i] + dt * (b[i] * d1 + 0.5 * a[i] * d2);
            for l in 0..d {
                acc += dy[l] * (v[i] * h[i * d + l] + c[i * d + l] * d1);
            }
            next[i] = acc;
        }
        extrapolate_edges(&mut next, nx, 1);
        std::mem::swap(&mut v, &mut next);
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::abort(k, "averaged dual sweep produced a non-finite value"));
        }
        snaps.push(GridFunction {
            x,
            z: None,
            t: obs.grid.time(k),
            values: v.clone(),
        });
    }
    snaps.reverse();
    Ok(DualSolveResult {
        snapshots: snaps,
        snapshot_steps: (0..=steps).collect(),
        stability: Stability {
            slow_courant: courant,
            fast_courant: 0.0,
            fast_substeps: 0,
        },
        dy: obs.dy.clone(),
    })
}

/// Largest change at `probes` when the averaged dual is re-solved on an axis
/// twice as wide.
pub fn boundary_influence(
    homog: &HomogenizedModel,
    phi: &TestFunction,
    obs: &ObservationPath,
    x: Axis,
    probes: &[f64],
) -> Result<f64> {
    let base = solve_averaged_dual(homog, phi, obs, x)?;
    let wide = solve_averaged_dual(homog, phi, obs, x.widened())?;
    Ok(probes
        .iter()
        .map(|&p| (base.initial().value_at(p, 0.0) - wide.initial().value_at(p, 0.0)).abs())
        .fold(0.0, f64::max))
}

/// Solves the full dual on the `x` by `z` grid. Each backward step applies
/// the slow generator and the observation term, then the fast generator
/// `(1/eps^2) G_F` in as many substeps as its explicit stability needs.
pub fn solve_full_dual(
    model: &NormalizedModel,
    phi: &TestFunction,
    obs: &ObservationPath,
    x: Axis,
    z: Axis,
    opts: &FullDualOptions,
) -> Result<DualSolveResult> {
    let mm = model.model();
    let dims = mm.dims;
    require_scalar_slow(dims)?;
    if dims.n != 1 {
        return Err(Error::Config(format!("the full dual solver needs a one-dimensional fast state, got n = {}", dims.n)));
    }
    x.validate()?;
    z.validate()?;
    if obs.d != dims.d {
        return Err(Error::Config("observation dimension does not match the model".into()));
    }
    if opts.snapshot_stride == 0 {
        return Err(Error::Config("snapshot_stride must be at least 1".into()));
    }
    let (d, w, vdim) = (dims.d, dims.w, dims.v);
    let (nx, nz) = (x.points, z.points);
    let nodes = nx * nz;
    let (dx, dz) = (x.pitch(), z.pitch());
    let dt = obs.grid.dt;
    let eps2 = model.epsilon() * model.epsilon();
    let at = model.alpha_t();

    let mut b = vec![0.0; nodes];
    let mut a = vec![0.0; nodes];
    let mut h = vec![0.0; nodes * d];
    let mut c = vec![0.0; nodes * d];
    let mut f = vec![0.0; nodes];
    let mut gg = vec![0.0; nodes];
    let mut sig = vec![0.0; w];
    let mut hv = vec![0.0; d];
    let mut fv = [0.0];
    let mut gv = vec![0.0; vdim];
    let mut slow_courant = 0.0f64;
    let mut fast_rate = 0.0f64;
    for i in 0..nx {
        for j in 0..nz {
            let (px, pz) = ([x.coord(i)], [z.coord(j)]);
            let k = i * nz + j;
            let mut bv = [0.0];
            mm.b.eval(&px, &pz, &mut bv)?;
            mm.sigma.eval(&px, &pz, &mut sig)?;
            mm.h.eval(&px, &pz, &mut hv)?;
            mm.f.eval(&px, &pz, &mut fv)?;
            mm.g.eval(&px, &pz, &mut gv)?;
            b[k] = bv[0];
            a[k] = sig.iter().map(|s| s * s).sum();
            for l in 0..d {
                h[k * d + l] = hv[l];
                c[k * d + l] = (0..w).map(|jw| at[jw * d + l] * sig[jw]).sum();
            }
            f[k] = fv[0];
            gg[k] = gv.iter().map(|g| g * g).sum();
            slow_courant = slow_courant.max(dt * (a[k] / (dx * dx) + b[k].abs() / dx));
            fast_rate = fast_rate.max(gg[k] / (dz * dz) + f[k].abs() / dz);
        }
    }
    if slow_courant > 1.0 {
        return Err(unstable("full dual (slow part)", slow_courant, dt));
    }
    let substeps = ((dt / eps2 * fast_rate) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let delta = dt / eps2 / substeps as f64;
    let fast_courant = delta * fast_rate;
    let steps = obs.grid.steps;
    let work = nodes as f64 * steps as f64 * (substeps + 1) as f64;
    if work > opts.max_work {
        return Err(Error::Config(format!(
            "full dual needs {work:.3e} node updates ({substeps} fast substeps per step), above the budget {:.3e}",
            opts.max_work
        )));
    }

    let mut v = vec![0.0; nodes];
    for i in 0..nx {
        let val = phi.value(&[x.coord(i)]);
        v[i * nz..(i + 1) * nz].iter_mut().for_each(|e| *e = val);
    }
    let snap = |v: &[f64], k: usize| GridFunction {
        x,
        z: Some(z),
        t: obs.grid.time(k),
        values: v.to_vec(),
    };
    let mut snaps = vec![snap(&v, steps)];
    let mut snap_steps = vec![steps];
    let mut next = v.clone();
    for k in (0..steps).rev() {
        let dy = obs.increment(k);
        for i in 1..nx - 1 {
            for j in 1..nz - 1 {
                let q = i * nz + j;
                let (d1, d2) = central(&v, q, nz, dx);
                let mut acc = v[q] + dt * (b[q] * d1 + 0.5 * a[q] * d2);
                for l in 0..d {
                    acc += dy[l] * (v[q] * h[q * d + l] + c[q * d + l] * d1);
                }
                next[q] = acc;
            }
        }
        extrapolate_edges(&mut next, nx, nz);
        std::mem::swap(&mut v, &mut next);
        for _ in 0..substeps {
            for i in 1..nx - 1 {
                for j in 1..nz - 1 {
                    let q = i * nz + j;
                    let (d1, d2) = central(&v, q, 1, dz);
                    next[q] = v[q] + delta * (f[q] * d1 + 0.5 * gg[q] * d2);
                }
            }
            extrapolate_edges(&mut next, nx, nz);
            std::mem::swap(&mut v, &mut next);
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::abort(k, "full dual sweep produced a non-finite value"));
        }
        if k == 0 || k % opts.snapshot_stride == 0 {
            snaps.push(snap(&v, k));
            snap_steps.push(k);
        }
    }
    snaps.reverse();
    snap_steps.reverse();
    Ok(DualSolveResult {
        snapshots: snaps,
        snapshot_steps: snap_steps,
        stability: Stability {
            slow_courant,
            fast_courant,
            fast_substeps: substeps,
        },
        dy: obs.dy.clone(),
    })
}
