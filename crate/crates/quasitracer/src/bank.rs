//! Filter bank for the amplitude fields `a_i(t;y)`, `b_i(t;y)` and their
//! y-derivatives, driven by one Brownian realization per (mode, channel).
//!
//! Each amplitude is a stochastic convolution whose kernel rate `alpha_i(y)`
//! depends on the slow position, so a trajectory needs the same noise
//! realization evaluated at a continuum of rates. The bank maintains, per
//! (mode, channel) pair, the convolution states
//!
//! `Z_m(t) = ∫_{-inf}^t e^{-alpha_m (t-s)} dw(s)`
//!
//! on a fixed grid of rates `alpha_m` spanning the admissible interval, all
//! nodes of a pair sharing the same increments. `Z(t; alpha)` has analytic
//! sample paths in the rate, so queries at arbitrary y go through a global
//! polynomial in the rate variable through Chebyshev nodes, which converges
//! geometrically in the node count and is smooth: the reported
//! y-derivatives are exactly the derivatives of the reported amplitudes,
//! and the evaluated velocity keeps its exact curl structure.

use crate::error::{Error, Result};
use crate::field::{ModeSet, PhaseGradient, PhasePoint, Vec2};
use crate::interp::{chebyshev_nodes, BarycentricGrid};
use crate::rng::RngStream;
use nalgebra::{DMatrix, DVector};

/// Default number of rate nodes.
pub const DEFAULT_BANK_NODES: usize = 33;

/// Eigenvalues of a covariance more negative than this (relative to the
/// largest) indicate a genuinely broken matrix rather than roundoff.
const PSD_CLIP_REL: f64 = 1e-10;

#[derive(Clone, Debug)]
struct StepCache {
    dt: f64,
    decay: Vec<f64>,
    factor: DMatrix<f64>,
}

/// Convolution states for all (mode, channel) pairs on a shared rate grid.
/// Single-owner mutable state: one bank per trajectory per worker.
#[derive(Clone, Debug)]
pub struct CoefficientBank {
    alpha_nodes: Vec<f64>,
    grid: BarycentricGrid,
    n_modes: usize,
    /// Indexed by pair = 2*mode + channel (0 = a, 1 = b), then node.
    z: Vec<Vec<f64>>,
    t: f64,
    step_cache: Option<StepCache>,
}

impl CoefficientBank {
    /// Nodes of the rate grid, ascending.
    pub fn alpha_nodes(&self) -> &[f64] {
        &self.alpha_nodes
    }

    pub fn n_pairs(&self) -> usize {
        2 * self.n_modes
    }

    /// Current fast time.
    pub fn fast_time(&self) -> f64 {
        self.t
    }

    /// Raw `Z` node states of one (mode, channel) pair.
    pub fn node_states(&self, pair: usize) -> &[f64] {
        &self.z[pair]
    }
}

fn validate_nodes(nodes: &[f64]) -> Result<()> {
    if nodes.len() < 4 {
        return Err(Error::invalid(format!(
            "bank needs at least 4 rate nodes, got {}",
            nodes.len()
        )));
    }
    for w in nodes.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::invalid("rate nodes must be strictly increasing"));
        }
    }
    if nodes[0] <= 0.0 {
        return Err(Error::invalid("rate nodes must be positive"));
    }
    Ok(())
}

/// Stationary covariance of the node vector `(Z_1..Z_M)`:
/// `E[Z_m Z_m'] = 1/b` with `b = alpha_m + alpha_m'`.
fn stationary_cov(nodes: &[f64]) -> DMatrix<f64> {
    let m = nodes.len();
    let mut c = DMatrix::zeros(m, m);
    for p in 0..m {
        for q in 0..m {
            c[(p, q)] = 1.0 / (nodes[p] + nodes[q]);
        }
    }
    c
}

/// Covariance of the shared-noise update increments
/// `I_m = ∫_0^h e^{-alpha_m u} dw`: `E[I_m I_m'] = (1 - e^{-bh})/b`.
fn update_cov(nodes: &[f64], h: f64) -> DMatrix<f64> {
    let m = nodes.len();
    let mut c = DMatrix::zeros(m, m);
    for p in 0..m {
        for q in 0..m {
            let b = nodes[p] + nodes[q];
            c[(p, q)] = (1.0 - (-b * h).exp()) / b;
        }
    }
    c
}

/// Symmetric factorization `F F^T = C` of a (numerically) PSD matrix via
/// eigendecomposition. The node kernels are nearly linearly dependent, so
/// the spectrum decays below roundoff; small negative eigenvalues are
/// clipped to zero, genuinely negative ones are a diagnostic error.
fn psd_factor(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = c.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if lmax <= 0.0 {
        return Err(Error::numerical("covariance has no positive eigenvalue"));
    }
    let mut lam = eig.eigenvalues.clone();
    for v in lam.iter_mut() {
        if *v < -PSD_CLIP_REL * lmax {
            return Err(Error::numerical(format!(
                "covariance not PSD: eigenvalue {v:.3e} vs max {lmax:.3e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let mut f = eig.eigenvectors;
    for j in 0..f.ncols() {
        let s = lam[j];
        for i in 0..f.nrows() {
            f[(i, j)] *= s;
        }
    }
    Ok(f)
}

/// Samples all pairs of a bank from the exact stationary joint law on the
/// default Chebyshev rate grid spanning `[gamma0, 1/gamma0]`.
pub fn bank_init_stationary(
    modes: &ModeSet,
    m: usize,
    rng: &mut RngStream,
) -> Result<CoefficientBank> {
    let nodes = chebyshev_nodes(modes.gamma0, 1.0 / modes.gamma0, m.max(2));
    bank_init_stationary_with_nodes(modes, nodes, rng)
}

/// Stationary initialization on a caller-supplied rate grid. The grid must
/// cover the rate range of every mode or later evaluations fail.
pub fn bank_init_stationary_with_nodes(
    modes: &ModeSet,
    nodes: Vec<f64>,
    rng: &mut RngStream,
) -> Result<CoefficientBank> {
    validate_nodes(&nodes)?;
    let m = nodes.len();
    let grid = BarycentricGrid::new(&nodes)?;
    let factor = psd_factor(&stationary_cov(&nodes))?;
    let n_pairs = 2 * modes.n();
    let mut z = Vec::with_capacity(n_pairs);
    let mut g = vec![0.0; m];
    for _ in 0..n_pairs {
        rng.fill_normal(&mut g);
        let w = &factor * DVector::from_column_slice(&g);
        z.push(w.as_slice().to_vec());
    }
    Ok(CoefficientBank {
        alpha_nodes: nodes,
        grid,
        n_modes: modes.n(),
        z,
        t: 0.0,
        step_cache: None,
    })
}

/// Builds a bank by direct midpoint quadrature of the convolution kernels
/// against stored Brownian increments: `increments[pair][j]` is the
/// increment over `[s_j, s_j + dt]` with `s_0 = t_end - n dt`. Reference
/// constructor for validating the interpolated bank against an explicit
/// path; an empty increment list yields the zero state.
pub fn bank_from_path(
    modes: &ModeSet,
    nodes: Vec<f64>,
    increments: &[Vec<f64>],
    dt: f64,
    t_end: f64,
) -> Result<CoefficientBank> {
    validate_nodes(&nodes)?;
    if increments.len() != 2 * modes.n() {
        return Err(Error::invalid("bank_from_path: need one increment series per (mode, channel)"));
    }
    let n_steps = increments[0].len();
    if increments.iter().any(|s| s.len() != n_steps) {
        return Err(Error::invalid("bank_from_path: increment series lengths differ"));
    }
    let m = nodes.len();
    let grid = BarycentricGrid::new(&nodes)?;
    let mut z = vec![vec![0.0; m]; increments.len()];
    for (pair, series) in increments.iter().enumerate() {
        for (mi, &alpha) in nodes.iter().enumerate() {
            let mut zs = 0.0;
            for (j, &dw) in series.iter().enumerate() {
                let u = (n_steps - j) as f64 * dt - 0.5 * dt;
                zs += (-alpha * u).exp() * dw;
            }
            z[pair][mi] = zs;
        }
    }
    Ok(CoefficientBank {
        alpha_nodes: nodes,
        grid,
        n_modes: modes.n(),
        z,
        t: t_end,
        step_cache: None,
    })
}

impl CoefficientBank {
    /// Advances all pairs by `dt` (fast time) with the exact joint Gaussian
    /// update: every node of a pair sees the same driving increments,
    /// distinct pairs draw independently.
    pub fn step(&mut self, dt: f64, rng: &mut RngStream) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("bank step needs dt > 0, got {dt}")));
        }
        let m = self.alpha_nodes.len();
        let rebuild = match &self.step_cache {
            Some(c) => c.dt != dt,
            None => true,
        };
        if rebuild {
            let factor = psd_factor(&update_cov(&self.alpha_nodes, dt))?;
            let decay = self.alpha_nodes.iter().map(|a| (-a * dt).exp()).collect();
            self.step_cache = Some(StepCache { dt, decay, factor });
        }
        let cache = self.step_cache.as_ref().expect("step cache populated above");
        let mut g = vec![0.0; m];
        for zp in self.z.iter_mut() {
            rng.fill_normal(&mut g);
            let w = &cache.factor * DVector::from_column_slice(&g);
            for i in 0..m {
                zp[i] = cache.decay[i] * zp[i] + w[i];
            }
        }
        self.t += dt;
        Ok(())
    }

    /// Evaluates the amplitudes and their y-derivatives at slow position y:
    ///
    /// `a_i = sqrt(2 alpha_i) sigma_i Z(alpha_i)`
    /// `da_i/dy_j = sqrt(2 alpha_i) gamma_ij Z(alpha_i)
    ///              + sqrt(2 alpha_i) sigma_i (dalpha_i/dy_j) Z'(alpha_i)`
    ///
    /// with `gamma_ij = dsigma_i/dy_j + (dalpha_i/dy_j) sigma_i/(2 alpha_i)`.
    /// `Z` and `Z'` come from the same interpolant, so the gradient is the
    /// exact y-derivative of the value even between rate nodes.
    pub fn eval(&self, modes: &ModeSet, y: Vec2) -> Result<(PhasePoint, PhaseGradient)> {
        if modes.n() != self.n_modes {
            return Err(Error::invalid("bank and mode set sizes differ"));
        }
        let (lo, hi) = (
            self.alpha_nodes[0],
            self.alpha_nodes[self.alpha_nodes.len() - 1],
        );
        let n = modes.n();
        let mut p = PhasePoint::zeros(n);
        let mut grad = PhaseGradient::zeros(n);
        for i in 0..n {
            let alpha = modes.alpha(i, y);
            if !(lo - 1e-9..=hi + 1e-9).contains(&alpha) {
                return Err(Error::numerical(format!(
                    "rate {alpha} of mode {i} outside bank grid [{lo}, {hi}]"
                )));
            }
            let alpha = alpha.clamp(lo, hi);
            let sigma = modes.sigma(i, y);
            let da = modes.modes[i].alpha.grad(y);
            let ds = modes.modes[i].sigma.grad(y);
            let root = (2.0 * alpha).sqrt();
            for ch in 0..2 {
                let (zv, dzv) = self.grid.eval_with_deriv(&self.z[2 * i + ch], alpha);
                let val = root * sigma * zv;
                let mut gv = [0.0; 2];
                for j in 0..2 {
                    let gamma = ds[j] + da[j] * sigma / (2.0 * alpha);
                    gv[j] = root * gamma * zv + root * sigma * da[j] * dzv;
                }
                if ch == 0 {
                    p.a[i] = val;
                    grad.a_y[i] = gv;
                } else {
                    p.b[i] = val;
                    grad.b_y[i] = gv;
                }
            }
        }
        Ok((p, grad))
    }
}
