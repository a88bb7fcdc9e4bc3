//! The limiting diffusion `dx = B(x) dt + sqrt(A(x)) dW` and its backward
//! Kolmogorov equation
//!
//! `d/dt u + B·grad u + (1/2) A : grad² u = 0,  u(T,·) = u0`,
//!
//! solved on a truncated box with explicit finite differences.

use crate::effective::EffectiveModel;
use crate::ensemble::{macro_grid, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::field::Vec2;
use crate::rng::RngStream;
use rayon::prelude::*;

/// Macro output resolution shared with the characteristics ensembles.
pub const POINTS_PER_UNIT: usize = 64;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LimitSdeConfig {
    pub x0: Vec2,
    /// Start time; the coefficients are time-homogeneous, so only the
    /// duration matters, but paths carry absolute timestamps.
    pub t0: f64,
    pub t1: f64,
    /// Euler–Maruyama step bound; macro intervals are subdivided evenly.
    pub dt: f64,
    pub points_per_unit: usize,
}

impl LimitSdeConfig {
    pub fn new(x0: Vec2, t1: f64) -> Self {
        Self {
            x0,
            t0: 0.0,
            t1,
            dt: 5e-3,
            points_per_unit: POINTS_PER_UNIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1e-2) {
            return Err(Error::invalid("SDE step must lie in (0, 1e-2]"));
        }
        if !(self.t1 > self.t0) || !self.t0.is_finite() {
            return Err(Error::invalid("need t1 > t0"));
        }
        if self.points_per_unit == 0 {
            return Err(Error::invalid("points_per_unit must be positive"));
        }
        Ok(())
    }
}

/// Lower-triangular factor `L L^T = A` for a symmetric 2x2 matrix.
/// Roundoff-negative pivots are clamped; genuinely indefinite input is
/// reported with the position at which it occurred.
fn cholesky_2x2(a: &[[f64; 2]; 2], x: Vec2) -> Result<[[f64; 2]; 2]> {
    let scale = 1.0 + a[0][0].abs() + a[1][1].abs();
    let tol = 1e-9 * scale;
    if a[0][0] < -tol {
        return Err(Error::numerical(format!(
            "diffusion matrix has negative A11={} at x=({:.4}, {:.4})",
            a[0][0], x[0], x[1]
        )));
    }
    let l11 = a[0][0].max(0.0).sqrt();
    let l21 = if l11 > 0.0 {
        a[0][1] / l11
    } else if a[0][1].abs() <= tol {
        0.0
    } else {
        return Err(Error::numerical(format!(
            "diffusion matrix has zero A11 but A12={} at x=({:.4}, {:.4})",
            a[0][1], x[0], x[1]
        )));
    };
    let rem = a[1][1] - l21 * l21;
    if rem < -tol {
        return Err(Error::numerical(format!(
            "diffusion matrix is indefinite (Schur complement {rem}) at x=({:.4}, {:.4})",
            x[0], x[1]
        )));
    }
    Ok([[l11, 0.0], [l21, rem.max(0.0).sqrt()]])
}

/// Euler–Maruyama ensemble of the limiting diffusion with coefficients
/// interpolated from the tabulated model. Paths derive independent child
/// streams from `rng`, so the ensemble is reproducible and order-stable.
pub fn simulate_limit(
    cfg: &LimitSdeConfig,
    effective: &EffectiveModel,
    n: usize,
    rng: &RngStream,
) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let times = macro_grid(cfg.t0, cfg.t1, cfg.points_per_unit);
    let paths: Result<Vec<Vec<Vec2>>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut prng = rng.child(p as u64);
            let mut x = cfg.x0;
            let mut out = Vec::with_capacity(times.len());
            out.push(x);
            for w in times.windows(2) {
                let span = w[1] - w[0];
                let k = ((span / cfg.dt).ceil() as usize).max(1);
                let h = span / k as f64;
                let sh = h.sqrt();
                for _ in 0..k {
                    let (b, a) = effective.interpolate(x);
                    let l = cholesky_2x2(&a, x)?;
                    let z = [prng.normal(), prng.normal()];
                    x = [
                        x[0] + b[0] * h + sh * l[0][0] * z[0],
                        x[1] + b[1] * h + sh * (l[1][0] * z[0] + l[1][1] * z[1]),
                    ];
                }
                out.push(x);
            }
            Ok(out)
        })
        .collect();
    TrajectoryEnsemble::new("limit", times, paths?)
}

/// Scalar samples on a rectangular grid, row-major over (y, x).
#[derive(Clone, Debug)]
pub struct GridFunction {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.xs.len() + ix]
    }

    /// Bilinear evaluation, clamped to the box.
    pub fn eval(&self, x: Vec2) -> f64 {
        let (i0, i1, tx) = bracket(&self.xs, x[0]);
        let (j0, j1, ty) = bracket(&self.ys, x[1]);
        let v00 = self.at(i0, j0);
        let v10 = self.at(i1, j0);
        let v01 = self.at(i0, j1);
        let v11 = self.at(i1, j1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }

    /// Grid dump in the long format `x1,x2,u`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x1", "x2", "u"])?;
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                w.serialize((x, y, self.at(ix, iy)))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    let last = grid.len() - 1;
    if x <= grid[0] {
        return (0, 0, 0.0);
    }
    if x >= grid[last] {
        return (last, last, 0.0);
    }
    let hi = grid.partition_point(|g| *g <= x).min(last);
    let lo = hi - 1;
    (lo, hi, (x - grid[lo]) / (grid[hi] - grid[lo]))
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BackwardPdeConfig {
    pub x_min: Vec2,
    pub x_max: Vec2,
    /// Node counts per axis, at least 3 each.
    pub nx: usize,
    pub ny: usize,
    /// The solution is reported at `t0`; terminal data sit at `t1`.
    pub t0: f64,
    pub t1: f64,
    /// Explicit time step; `None` derives one from the stability bound.
    pub dt: Option<f64>,
    /// Safety factor applied to the stability bound, in (0, 1].
    pub cfl: f64,
}

impl BackwardPdeConfig {
    pub fn new(x_min: Vec2, x_max: Vec2, nx: usize, ny: usize, t0: f64, t1: f64) -> Self {
        Self {
            x_min,
            x_max,
            nx,
            ny,
            t0,
            t1,
            dt: None,
            cfl: 0.45,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::invalid("grid needs at least 3 nodes per axis"));
        }
        if !(self.x_max[0] > self.x_min[0] && self.x_max[1] > self.x_min[1]) {
            return Err(Error::invalid("box must have positive extent"));
        }
        if !(self.t1 > self.t0) {
            return Err(Error::invalid("need t1 > t0"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid("cfl factor must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PdeSolution {
    /// Solution at `t0` on the configured grid.
    pub u: GridFunction,
    pub dt: f64,
    pub n_steps: usize,
    pub max_trace_a: f64,
    pub max_drift: f64,
}

/// Explicit upwind/centered finite differences for the terminal-value
/// problem, marched in time-to-go from `t1` down to `t0`. The boundary is
/// zero-gradient (Neumann outflow); the box should be chosen large enough
/// that the terminal data and the transition density are negligible there.
pub fn solve_backward_pde(
    cfg: &BackwardPdeConfig,
    effective: &EffectiveModel,
    u0: &(impl Fn(Vec2) -> f64 + Sync),
) -> Result<PdeSolution> {
    cfg.validate()?;
    let (nx, ny) = (cfg.nx, cfg.ny);
    let xs: Vec<f64> = (0..nx)
        .map(|i| cfg.x_min[0] + (cfg.x_max[0] - cfg.x_min[0]) * i as f64 / (nx - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..ny)
        .map(|j| cfg.x_min[1] + (cfg.x_max[1] - cfg.x_min[1]) * j as f64 / (ny - 1) as f64)
        .collect();
    let h1 = xs[1] - xs[0];
    let h2 = ys[1] - ys[0];

    // Node-frozen coefficients: [b1, b2, a11, a12, a22].
    let coef: Vec<[f64; 5]> = (0..nx * ny)
        .map(|idx| {
            let (iy, ix) = (idx / nx, idx % nx);
            let (b, a) = effective.interpolate([xs[ix], ys[iy]]);
            [b[0], b[1], a[0][0], a[0][1], a[1][1]]
        })
        .collect();
    let max_trace_a = coef.iter().map(|c| c[2] + c[4]).fold(0.0, f64::max);
    let max_drift = coef
        .iter()
        .map(|c| c[0].abs().max(c[1].abs()))
        .fold(0.0, f64::max);
    // Sum of the explicit update magnitudes; keeping it below one makes
    // the scheme a near-convex combination of neighbor values.
    let explicit_load = coef
        .iter()
        .map(|c| {
            c[2] / (h1 * h1)
                + c[4] / (h2 * h2)
                + c[3].abs() / (h1 * h2)
                + c[0].abs() / h1
                + c[1].abs() / h2
        })
        .fold(0.0, f64::max);

    let h = h1.min(h2);
    let diff_bound = if max_trace_a > 0.0 {
        h * h / (2.0 * max_trace_a)
    } else {
        f64::INFINITY
    };
    let drift_bound = if max_drift > 0.0 {
        h / max_drift
    } else {
        f64::INFINITY
    };
    let load_bound = if explicit_load > 0.0 {
        0.95 / explicit_load
    } else {
        f64::INFINITY
    };
    let stability = diff_bound.min(drift_bound).min(load_bound);
    if !stability.is_finite() && cfg.dt.is_none() {
        return Err(Error::invalid(
            "coefficients vanish on the whole grid; supply dt explicitly",
        ));
    }
    let dt_cap = cfg.cfl * stability;
    let dt = match cfg.dt {
        Some(d) => {
            if !(d > 0.0) || d > stability {
                return Err(Error::numerical(format!(
                    "time step {d} violates the stability bound {stability}"
                )));
            }
            d
        }
        None => dt_cap,
    };
    let span = cfg.t1 - cfg.t0;
    let n_steps = (span / dt).ceil().max(1.0) as usize;
    let dt = span / n_steps as f64;

    let mut cur: Vec<f64> = (0..nx * ny)
        .map(|idx| u0([xs[idx % nx], ys[idx / nx]]))
        .collect();
    let mut next = vec![0.0; nx * ny];
    for _ in 0..n_steps {
        next.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
            let iym = iy.saturating_sub(1);
            let iyp = (iy + 1).min(ny - 1);
            let dy = ys[iyp] - ys[iym];
            for ix in 0..nx {
                let ixm = ix.saturating_sub(1);
                let ixp = (ix + 1).min(nx - 1);
                let c = &coef[iy * nx + ix];
                let v = cur[iy * nx + ix];
                let ve = cur[iy * nx + ixp];
                let vw = cur[iy * nx + ixm];
                let vn = cur[iyp * nx + ix];
                let vs = cur[iym * nx + ix];
                // Time-to-go form d/dtau v = B·grad v + (1/2) A:grad² v;
                // positive drift pulls data from the positive side.
                let adv1 = if c[0] > 0.0 {
                    c[0] * (ve - v) / h1
                } else {
                    c[0] * (v - vw) / h1
                };
                let adv2 = if c[1] > 0.0 {
                    c[1] * (vn - v) / h2
                } else {
                    c[1] * (v - vs) / h2
                };
                let vxx = (ve - 2.0 * v + vw) / (h1 * h1);
                let vyy = (vn - 2.0 * v + vs) / (h2 * h2);
                let dx = xs[ixp] - xs[ixm];
                let vxy = (cur[iyp * nx + ixp] - cur[iyp * nx + ixm] - cur[iym * nx + ixp]
                    + cur[iym * nx + ixm])
                    / (dx * dy);
                row[ix] = v + dt * (adv1 + adv2 + 0.5 * c[2] * vxx + c[3] * vxy + 0.5 * c[4] * vyy);
            }
        });
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(PdeSolution {
        u: GridFunction {
            xs,
            ys,
            values: cur,
        },
        dt,
        n_steps,
        max_trace_a,
        max_drift,
    })
}
