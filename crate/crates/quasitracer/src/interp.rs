//! Global polynomial interpolation in barycentric form on a fixed node
//! grid, plus the Chebyshev grids it is meant to be used with.
//!
//! The coefficient bank queries its convolution states at arbitrary rates.
//! Those states are restrictions of functions analytic in the rate, so one
//! interpolating polynomial through Chebyshev nodes converges geometrically
//! in the node count, and its smoothness carries over to everything derived
//! from the interpolant: the reported rate-derivative is the exact
//! derivative of the reported value, with no interval seams where curvature
//! could jump.

use crate::error::{Error, Result};

/// Distance below which a derivative query is answered by the
/// differentiation-matrix row of the nearest node instead of the off-node
/// formula, relative to the grid radius. Balances the O(eps/d) roundoff of
/// the formula against the O(d) Taylor error of the node row.
const NODE_SNAP_REL: f64 = 1e-8;

/// Interpolation nodes with precomputed barycentric weights. Node values
/// are passed at call time, so one grid serves many data vectors without
/// any per-vector build step.
#[derive(Clone, Debug)]
pub struct BarycentricGrid {
    x: Vec<f64>,
    w: Vec<f64>,
    rad: f64,
}

impl BarycentricGrid {
    /// Builds the grid and its weights. Requires at least 2 strictly
    /// increasing nodes. Weights are formed on the interval rescaled to
    /// [-1, 1] and normalized; both changes drop out of the barycentric
    /// ratios, and they keep node counts in the hundreds inside f64 range.
    pub fn new(x: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "barycentric grid needs at least 2 nodes, got {n}"
            )));
        }
        for w in x.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(
                    "barycentric grid nodes must be strictly increasing",
                ));
            }
        }
        let mid = 0.5 * (x[0] + x[n - 1]);
        let rad = 0.5 * (x[n - 1] - x[0]);
        let xs: Vec<f64> = x.iter().map(|&v| (v - mid) / rad).collect();
        let mut w = vec![0.0; n];
        for j in 0..n {
            let mut p = 1.0;
            for k in 0..n {
                if k != j {
                    p *= xs[j] - xs[k];
                }
            }
            w[j] = 1.0 / p;
        }
        let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for v in w.iter_mut() {
            *v /= scale;
        }
        Ok(Self {
            x: x.to_vec(),
            w,
            rad,
        })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Interpolant value at `xq` for node values `f` (one per node).
    /// Queries outside the node span extrapolate the polynomial; callers
    /// that need a hard range check do it themselves.
    pub fn eval(&self, f: &[f64], xq: f64) -> f64 {
        assert_eq!(f.len(), self.x.len());
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..self.x.len() {
            let d = xq - self.x[j];
            if d == 0.0 {
                return f[j];
            }
            let c = self.w[j] / d;
            num += c * f[j];
            den += c;
        }
        num / den
    }

    /// Interpolant value and first derivative at `xq`. The derivative uses
    /// the Schneider-Werner identity off the nodes and the differentiation
    /// row at (or within the snap window of) a node.
    pub fn eval_with_deriv(&self, f: &[f64], xq: f64) -> (f64, f64) {
        assert_eq!(f.len(), self.x.len());
        let n = self.x.len();
        if let Some(k) = self.nearest_within_snap(xq) {
            let mut s = 0.0;
            for j in 0..n {
                if j != k {
                    s += (self.w[j] / self.w[k]) * (f[j] - f[k]) / (self.x[k] - self.x[j]);
                }
            }
            return (self.eval(f, xq), s);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            let c = self.w[j] / (xq - self.x[j]);
            num += c * f[j];
            den += c;
        }
        let p = num / den;
        let mut dnum = 0.0;
        for j in 0..n {
            let d = xq - self.x[j];
            dnum += self.w[j] * (p - f[j]) / (d * d);
        }
        (p, dnum / den)
    }

    /// First derivative of the interpolant at `xq`.
    pub fn eval_deriv(&self, f: &[f64], xq: f64) -> f64 {
        self.eval_with_deriv(f, xq).1
    }

    fn nearest_within_snap(&self, xq: f64) -> Option<usize> {
        let p = self.x.partition_point(|&v| v <= xq);
        let tol = NODE_SNAP_REL * self.rad;
        if p > 0 && (xq - self.x[p - 1]).abs() <= tol {
            return Some(p - 1);
        }
        if p < self.x.len() && (xq - self.x[p]).abs() <= tol {
            return Some(p);
        }
        None
    }
}

/// Chebyshev points of the second kind mapped to [lo, hi], ascending.
pub fn chebyshev_nodes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo);
    let mid = 0.5 * (lo + hi);
    let rad = 0.5 * (hi - lo);
    (0..n)
        .map(|j| {
            let th = std::f64::consts::PI * j as f64 / (n - 1) as f64;
            mid - rad * th.cos()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn interpolates_nodes_exactly() {
        let x = chebyshev_nodes(0.5, 2.0, 9);
        let f: Vec<f64> = x.iter().map(|&v| (3.0 * v).sin() / v).collect();
        let g = BarycentricGrid::new(&x).unwrap();
        for (xi, fi) in x.iter().zip(&f) {
            assert_abs_diff_eq!(g.eval(&f, *xi), *fi, epsilon = 1e-13);
        }
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        // Degree n-1 data on n nodes is reproduced along with its derivative.
        let p = |v: f64| 2.0 - 0.5 * v + 3.0 * v * v - 0.7 * v * v * v * v * v;
        let dp = |v: f64| -0.5 + 6.0 * v - 3.5 * v * v * v * v;
        let x = chebyshev_nodes(0.5, 2.0, 6);
        let f: Vec<f64> = x.iter().map(|&v| p(v)).collect();
        let g = BarycentricGrid::new(&x).unwrap();
        for j in 0..=60 {
            let v = 0.5 + 1.5 * j as f64 / 60.0;
            assert_abs_diff_eq!(g.eval(&f, v), p(v), epsilon = 1e-11);
            assert_abs_diff_eq!(g.eval_deriv(&f, v), dp(v), epsilon = 1e-9);
        }
    }

    #[test]
    fn geometric_convergence_on_analytic_data() {
        // Kernel-sum data of the coefficient-bank kind; the interpolation
        // error on [0.5, 2] should fall by orders of magnitude from 9 to 17
        // nodes, with 17 nodes already near roundoff.
        let f = |v: f64| {
            (-0.7 * v).exp() - 0.4 * (-3.1 * v).exp() + 0.2 * (-8.4 * v).exp()
        };
        let err = |n: usize| -> f64 {
            let x = chebyshev_nodes(0.5, 2.0, n);
            let fv: Vec<f64> = x.iter().map(|&v| f(v)).collect();
            let g = BarycentricGrid::new(&x).unwrap();
            let mut e: f64 = 0.0;
            for j in 0..=400 {
                let v = 0.5 + 1.5 * j as f64 / 400.0;
                e = e.max((g.eval(&fv, v) - f(v)).abs());
            }
            e
        };
        let (e9, e17) = (err(9), err(17));
        assert!(e9 / e17 > 1e3, "e9={e9}, e17={e17}");
        assert!(e17 < 1e-10, "e17={e17}");
    }

    #[test]
    fn deriv_is_exact_derivative_of_eval() {
        // The value/derivative pair must agree to centered-difference
        // truncation order at arbitrary points, nodes included.
        let x = chebyshev_nodes(0.5, 2.0, 13);
        let f: Vec<f64> = x.iter().map(|&v| (v * v).ln()).collect();
        let g = BarycentricGrid::new(&x).unwrap();
        let h = 1e-6;
        let mut points: Vec<f64> = x.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        points.extend(x.iter().skip(1).take(11).cloned());
        for v in points {
            let fd = (g.eval(&f, v + h) - g.eval(&f, v - h)) / (2.0 * h);
            assert_abs_diff_eq!(g.eval_deriv(&f, v), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn stable_arbitrarily_close_to_nodes() {
        let x = chebyshev_nodes(0.5, 2.0, 13);
        let f: Vec<f64> = x.iter().map(|&v| (2.5 * v).sin()).collect();
        let df = |v: f64| 2.5 * (2.5 * v).cos();
        let g = BarycentricGrid::new(&x).unwrap();
        for k in [1, 5, 11] {
            for off in [1e-15, 1e-12, 1e-9, 1e-7] {
                for sgn in [-1.0, 1.0] {
                    let v = x[k] + sgn * off;
                    assert_abs_diff_eq!(g.eval(&f, v), (2.5 * v).sin(), epsilon = 1e-10);
                    assert_abs_diff_eq!(g.eval_deriv(&f, v), df(v), epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(BarycentricGrid::new(&[0.0]).is_err());
        assert!(BarycentricGrid::new(&[0.0, 1.0, 1.0]).is_err());
        assert!(BarycentricGrid::new(&[0.0, 2.0, 1.0]).is_err());
    }
}
