//! Effective coefficients of the limiting diffusion: the homogenized drift
//! `B(y)` and diffusivity `A(y)`, assembled from corrector statistics of
//! the frozen cell problem.
//!
//! `A_{qq'}(y) = 2 sum_i alpha_i sigma_i² E_nu[chi_{q,a_i} chi_{q',a_i}
//!               + chi_{q,b_i} chi_{q',b_i}]`
//!
//! `B_q(y) = sum_{i,j} (-2 alpha_i sigma_{i,y_j}/sigma_i)
//!               E_nu[T^{(1)}_{i,j} a_i + T^{(2)}_{i,j} b_i]
//!           + sum_j E_nu[w_j d/dy_j chi_q]`
//!
//! where `(T^{(1)}, T^{(2)})` solve the coupled mode-relaxation system with
//! data `F_{i,j} = (e_j^perp)_q - D_j^perp chi_q + w_j chi_{q,a_i}` and
//! `G_{i,j} = w_j chi_{q,b_i}`. The drift display folds the Gaussian
//! integration-by-parts identity `E_nu[d/da f] = E_nu[a f]/sigma²` into the
//! stated moment form, so only amplitude moments of the resolvent are
//! needed. The second drift term carries the covariation between the
//! amplitude noise and its y-derivative; it vanishes when the loudness
//! profiles are flat in y, which the single-mode closed form
//! `B_2 = (1/2) d/dy_2 (2 sigma²/alpha)` confirms.

use crate::cell::{
    corrector_theta, grad_chi_single_path, grad_chi_y,
};
use crate::error::{Error, Result};
use crate::field::{perp, sample_invariant, w_functional, ModeSet, Vec2};
use crate::galerkin::{galerkin_solve_chi, GalerkinCorrector, HermiteBasis};
use crate::rng::RngStream;
use nalgebra::{DVector, Matrix2};
use rayon::prelude::*;

/// Defaults shared by the estimators and the tabulation driver.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EffectiveConfig {
    /// Invariant-measure probe count per grid point.
    pub n_probes: usize,
    /// Time-quadrature tolerance for the corrector estimators.
    pub tol: f64,
    /// Central-difference step for the slow-position derivative.
    pub fd_step: f64,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self {
            n_probes: 1000,
            tol: 1e-3,
            fd_step: 0.02,
        }
    }
}

/// Spectral basis degree that keeps the Galerkin solve well inside the
/// supported dimension budget.
pub fn default_degree(n_modes: usize) -> u8 {
    match n_modes {
        1 => 10,
        2 => 8,
        _ => 6,
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AEstimate {
    pub a: [[f64; 2]; 2],
    pub se: [[f64; 2]; 2],
    /// Eigenvalue mass removed by the positive-semidefinite projection.
    pub psd_projection: f64,
    pub n_samples: usize,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BTerms {
    pub theta: [f64; 2],
    pub chi_y: [f64; 2],
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct BEstimate {
    pub b: [f64; 2],
    pub se: [f64; 2],
    /// Mean contribution of the mode-relaxation and corrector-derivative
    /// parts, for diagnostics.
    pub terms: BTerms,
    pub n_samples: usize,
}

/// Clips negative eigenvalues of a symmetric 2x2 matrix to zero and
/// reports the removed mass.
pub fn psd_clip_2x2(a: [[f64; 2]; 2]) -> ([[f64; 2]; 2], f64) {
    let m = Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut clipped = 0.0;
    let mut vals = eig.eigenvalues;
    for l in 0..2 {
        if vals[l] < 0.0 {
            clipped += -vals[l];
            vals[l] = 0.0;
        }
    }
    if clipped == 0.0 {
        return (a, 0.0);
    }
    let rebuilt = &eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (
        [
            [rebuilt[(0, 0)], rebuilt[(0, 1)]],
            [rebuilt[(1, 0)], rebuilt[(1, 1)]],
        ],
        clipped,
    )
}

/// Monte-Carlo estimate of the effective diffusivity at one slow position.
/// Each probe draws an invariant amplitude point and two independent
/// pathwise corrector gradients; the cross product of the replicas is an
/// unbiased estimate of the gradient product, free of single-sample
/// variance inflation.
pub fn estimate_a(
    modes: &ModeSet,
    y: Vec2,
    n: usize,
    rng: &RngStream,
) -> Result<AEstimate> {
    if n == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    // The gradient integrand decays at the spectral rate, and the per-probe
    // values are deterministic whenever the Jacobian flow is; the horizon
    // therefore pushes the truncated tail below the quadrature floor so the
    // reported uncertainty is purely statistical.
    let tail_tol: f64 = 1e-10;
    let t_max = (2.0 / tail_tol).ln() / modes.gamma0;
    let nn = modes.n();
    let weights: Vec<f64> = (0..nn)
        .map(|i| modes.alpha(i, y) * modes.sigma(i, y).powi(2))
        .collect();
    let samples: Vec<Option<[f64; 3]>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let probe = rng.child(s as u64);
            let mut draw = probe.child(0);
            let a0 = sample_invariant(modes, y, &mut draw);
            let mut reps = Vec::with_capacity(2);
            for r in 0..2u64 {
                let mut path_rng = probe.child(1 + r);
                match grad_chi_single_path(&a0, y, t_max, modes, &mut path_rng) {
                    Some(g) => reps.push(g),
                    None => return None,
                }
            }
            let (g1, g2) = (&reps[0], &reps[1]);
            let pair = |qa: usize, qb: usize| -> f64 {
                (0..nn)
                    .map(|i| {
                        2.0 * weights[i]
                            * (g1[qa][i] * g2[qb][i] + g1[qa][nn + i] * g2[qb][nn + i])
                    })
                    .sum()
            };
            let a00 = 0.5 * (pair(0, 0) + pair(0, 0));
            let a01 = 0.5 * (pair(0, 1) + pair(1, 0));
            let a11 = 0.5 * (pair(1, 1) + pair(1, 1));
            Some([a00, a01, a11])
        })
        .collect();
    let mut kept = Vec::with_capacity(n);
    let mut aborted = 0usize;
    for s in samples {
        match s {
            Some(v) => kept.push(v),
            None => aborted += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::numerical("all diffusivity probes aborted"));
    }
    let nf = kept.len() as f64;
    let mut mean = [0.0; 3];
    let mut var = [0.0; 3];
    for v in &kept {
        for l in 0..3 {
            mean[l] += v[l];
        }
    }
    for l in 0..3 {
        mean[l] /= nf;
    }
    for v in &kept {
        for l in 0..3 {
            var[l] += (v[l] - mean[l]).powi(2);
        }
    }
    let se: Vec<f64> = var.iter().map(|v| (v / (nf * nf)).sqrt()).collect();
    let raw = [[mean[0], mean[1]], [mean[1], mean[2]]];
    let (a, projection) = psd_clip_2x2(raw);
    let trace = a[0][0] + a[1][1];
    let mut warning = None;
    if projection > 1e-3 * trace.abs().max(f64::MIN_POSITIVE) {
        warning = Some(format!(
            "PSD projection removed {projection:.3e} against trace {trace:.3e}"
        ));
    }
    if aborted > 0 {
        let msg = format!("{aborted} probes hit the Jacobian guard");
        warning = Some(match warning {
            Some(w) => format!("{w}; {msg}"),
            None => msg,
        });
    }
    Ok(AEstimate {
        a,
        se: [[se[0], se[1]], [se[1], se[2]]],
        psd_projection: projection,
        n_samples: kept.len(),
        warning,
    })
}

/// Coefficient vectors of the mode-relaxation data `(F_{i,j}, G_{i,j})`
/// for one drift direction, built exactly from the Galerkin corrector.
fn theta_data(
    chi: &GalerkinCorrector,
    modes: &ModeSet,
    q: usize,
) -> Vec<Vec<(DVector<f64>, DVector<f64>)>> {
    let basis = &chi.basis;
    let nn = modes.n();
    let dperp: Vec<DVector<f64>> = (0..2)
        .map(|j| {
            let mut acc = DVector::zeros(basis.dim());
            for l in 0..nn {
                let kp = perp(modes.modes[l].k)[j];
                if kp != 0.0 {
                    acc += kp * basis.rotation_apply(&chi.coeffs, l);
                }
            }
            acc
        })
        .collect();
    (0..nn)
        .map(|i| {
            let da = basis.diff_coord(&chi.coeffs, i);
            let db = basis.diff_coord(&chi.coeffs, nn + i);
            (0..2)
                .map(|j| {
                    let e_perp_q = match (q, j) {
                        (0, 1) => 1.0,
                        (1, 0) => -1.0,
                        _ => 0.0,
                    };
                    let mut f = basis.mul_w_component(&da, j, modes) - &dperp[j];
                    f[0] += e_perp_q;
                    let g = basis.mul_w_component(&db, j, modes);
                    (f, g)
                })
                .collect()
        })
        .collect()
}

/// Monte-Carlo estimate of the effective drift at one slow position. Each
/// probe shares one invariant draw across the resolvent moments and the
/// corrector y-derivative (common random numbers across the assembled
/// pieces).
pub fn estimate_b(
    modes: &ModeSet,
    y: Vec2,
    n: usize,
    rng: &RngStream,
) -> Result<BEstimate> {
    if n == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    let nn = modes.n();
    let tol = 1e-3;
    let fd_step = 0.02;
    let degree = default_degree(nn);
    let chis = [
        galerkin_solve_chi(modes, y, 0, degree)?,
        galerkin_solve_chi(modes, y, 1, degree)?,
    ];
    // Covariation prefactors; identically zero for flat loudness profiles.
    let prefac: Vec<[f64; 2]> = (0..nn)
        .map(|i| {
            let alpha = modes.alpha(i, y);
            let sigma = modes.sigma(i, y);
            let ds = modes.modes[i].sigma.grad(y);
            [
                -2.0 * alpha * ds[0] / sigma,
                -2.0 * alpha * ds[1] / sigma,
            ]
        })
        .collect();
    let theta_active = prefac.iter().flatten().any(|c| *c != 0.0);
    let data: Vec<Vec<Vec<(DVector<f64>, DVector<f64>)>>> = if theta_active {
        (0..2).map(|q| theta_data(&chis[q], modes, q)).collect()
    } else {
        Vec::new()
    };
    let basis: &HermiteBasis = &chis[0].basis;
    let samples: Vec<[f64; 6]> = (0..n)
        .into_par_iter()
        .map(|s| {
            let probe = rng.child(s as u64);
            let mut draw = probe.child(0);
            let a0 = sample_invariant(modes, y, &mut draw);
            let mut btheta = [0.0; 2];
            if theta_active {
                let tstream = probe.child(1);
                for q in 0..2 {
                    for i in 0..nn {
                        for j in 0..2 {
                            if prefac[i][j] == 0.0 {
                                continue;
                            }
                            let (fv, gv) = &data[q][i][j];
                            let f = |p: &crate::field::PhasePoint| basis.eval(fv, p);
                            let g = |p: &crate::field::PhasePoint| basis.eval(gv, p);
                            let est = corrector_theta(
                                i, &f, &g, &a0, y, tol, 1, modes, &tstream,
                            )
                            .expect("validated inputs");
                            // The resolvent is the negative of the
                            // relaxation pair.
                            let moment =
                                -est.theta1 * a0.a[i] - est.theta2 * a0.b[i];
                            btheta[q] += prefac[i][j] * moment;
                        }
                    }
                }
            }
            let w = w_functional(&a0, modes);
            let mut bchi = [0.0; 2];
            for q in 0..2 {
                let (d, _) = grad_chi_y(
                    q,
                    &a0,
                    y,
                    fd_step,
                    tol,
                    1,
                    modes,
                    &probe.child(2 + q as u64),
                )
                .expect("validated inputs");
                bchi[q] = w[0] * d[0] + w[1] * d[1];
            }
            [
                btheta[0] + bchi[0],
                btheta[1] + bchi[1],
                btheta[0],
                btheta[1],
                bchi[0],
                bchi[1],
            ]
        })
        .collect();
    let nf = n as f64;
    let mut mean = [0.0; 6];
    for v in &samples {
        for l in 0..6 {
            mean[l] += v[l];
        }
    }
    for m in &mut mean {
        *m /= nf;
    }
    let mut var = [0.0; 2];
    for v in &samples {
        for l in 0..2 {
            var[l] += (v[l] - mean[l]).powi(2);
        }
    }
    Ok(BEstimate {
        b: [mean[0], mean[1]],
        se: [(var[0] / (nf * nf)).sqrt(), (var[1] / (nf * nf)).sqrt()],
        terms: BTerms {
            theta: [mean[2], mean[3]],
            chi_y: [mean[4], mean[5]],
        },
        n_samples: n,
    })
}

/// Both coefficient estimates at one slow position.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EffectiveEstimate {
    pub y: Vec2,
    pub b: [f64; 2],
    pub b_se: [f64; 2],
    pub a: [[f64; 2]; 2],
    pub a_se: [[f64; 2]; 2],
    pub psd_projection: f64,
    pub warning: Option<String>,
}

pub fn estimate_effective(
    modes: &ModeSet,
    y: Vec2,
    cfg: &EffectiveConfig,
    rng: &RngStream,
) -> Result<EffectiveEstimate> {
    let a = estimate_a(modes, y, cfg.n_probes, &rng.child(0))?;
    let b = estimate_b(modes, y, cfg.n_probes, &rng.child(1))?;
    Ok(EffectiveEstimate {
        y,
        b: b.b,
        b_se: b.se,
        a: a.a,
        a_se: a.se,
        psd_projection: a.psd_projection,
        warning: a.warning,
    })
}

/// The tabulated effective model on a rectangular slow-position grid,
/// row-major over (y2, y1).
#[derive(Clone, Debug, serde::Serialize)]
pub struct EffectiveModel {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub points: Vec<EffectiveEstimate>,
}

impl EffectiveModel {
    /// Builds a model from analytic coefficient functions; used by solver
    /// tests and for closed-form comparison runs.
    pub fn from_functions(
        y1: &[f64],
        y2: &[f64],
        b: impl Fn(Vec2) -> [f64; 2],
        a: impl Fn(Vec2) -> [[f64; 2]; 2],
    ) -> Result<EffectiveModel> {
        validate_grid(y1, y2)?;
        let mut points = Vec::with_capacity(y1.len() * y2.len());
        for &g2 in y2 {
            for &g1 in y1 {
                let y = [g1, g2];
                points.push(EffectiveEstimate {
                    y,
                    b: b(y),
                    b_se: [0.0; 2],
                    a: a(y),
                    a_se: [[0.0; 2]; 2],
                    psd_projection: 0.0,
                    warning: None,
                });
            }
        }
        Ok(EffectiveModel {
            y1: y1.to_vec(),
            y2: y2.to_vec(),
            points,
        })
    }

    /// A single-point model: interpolation returns the same coefficients
    /// everywhere.
    pub fn constant(b: [f64; 2], a: [[f64; 2]; 2]) -> EffectiveModel {
        EffectiveModel::from_functions(&[0.0], &[0.0], |_| b, |_| a)
            .expect("single-point grid is valid")
    }

    pub fn at(&self, ix: usize, iy: usize) -> &EffectiveEstimate {
        &self.points[iy * self.y1.len() + ix]
    }

    /// Bilinear interpolation of (B, A), clamped to the grid box. A single
    /// grid point degenerates to a constant model.
    pub fn interpolate(&self, y: Vec2) -> ([f64; 2], [[f64; 2]; 2]) {
        let (i0, i1, tx) = bracket(&self.y1, y[0]);
        let (j0, j1, ty) = bracket(&self.y2, y[1]);
        let mut b = [0.0; 2];
        let mut a = [[0.0; 2]; 2];
        let corners = [
            (self.at(i0, j0), (1.0 - tx) * (1.0 - ty)),
            (self.at(i1, j0), tx * (1.0 - ty)),
            (self.at(i0, j1), (1.0 - tx) * ty),
            (self.at(i1, j1), tx * ty),
        ];
        for (pt, w) in corners {
            for q in 0..2 {
                b[q] += w * pt.b[q];
                for r in 0..2 {
                    a[q][r] += w * pt.a[q][r];
                }
            }
        }
        (b, a)
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    if grid.len() == 1 {
        return (0, 0, 0.0);
    }
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

fn validate_grid(y1: &[f64], y2: &[f64]) -> Result<()> {
    if y1.is_empty() || y2.is_empty() {
        return Err(Error::invalid("grid must be nonempty"));
    }
    for g in [y1, y2] {
        if g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid coordinates must be strictly increasing"));
        }
    }
    Ok(())
}

/// Tabulates the effective model over the grid; points are independent
/// work items with per-point derived streams.
pub fn tabulate_effective(
    modes: &ModeSet,
    y1: &[f64],
    y2: &[f64],
    cfg: &EffectiveConfig,
    rng: &RngStream,
) -> Result<EffectiveModel> {
    validate_grid(y1, y2)?;
    let n_points = y1.len() * y2.len();
    let points: Result<Vec<EffectiveEstimate>> = (0..n_points)
        .into_par_iter()
        .map(|idx| {
            let (iy, ix) = (idx / y1.len(), idx % y1.len());
            let y = [y1[ix], y2[iy]];
            estimate_effective(modes, y, cfg, &rng.child(idx as u64))
        })
        .collect();
    Ok(EffectiveModel {
        y1: y1.to_vec(),
        y2: y2.to_vec(),
        points: points?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Mode, Profile};
    use crate::testutil::varied_modes_2;

    fn single_mode(alpha: Profile, sigma: Profile) -> ModeSet {
        ModeSet::new(
            0.5,
            0.5,
            vec![Mode {
                k: [1.0, 0.0],
                alpha,
                sigma,
            }],
        )
        .unwrap()
    }

    fn const_profile(v: f64) -> Profile {
        Profile::Constant { value: v }
    }

    #[test]
    fn diffusivity_matches_single_mode_closed_form() {
        // chi_2 = -b, chi_1 = 0 at alpha = sigma = 1, so A = diag(0, 2).
        let modes = single_mode(const_profile(1.0), const_profile(1.0));
        let rng = RngStream::root(101);
        let est = estimate_a(&modes, [0.0, 0.0], 1500, &rng).unwrap();
        assert_eq!(est.a[0][1], est.a[1][0]);
        assert!(est.a[0][0].abs() < 3.0 * est.se[0][0] + 1e-3, "{:?}", est.a);
        assert!(est.a[0][1].abs() < 3.0 * est.se[0][1] + 1e-3, "{:?}", est.a);
        assert!(
            (est.a[1][1] - 2.0).abs() < 3.0 * est.se[1][1] + 0.02,
            "A22 {} ± {}",
            est.a[1][1],
            est.se[1][1]
        );
        assert!(est.psd_projection <= 1e-3 * (est.a[0][0] + est.a[1][1]));
    }

    #[test]
    fn diffusivity_scales_with_amplitude_variance() {
        let rng = RngStream::root(103);
        let base = single_mode(const_profile(1.0), const_profile(1.0));
        let loud = single_mode(const_profile(1.0), const_profile(std::f64::consts::SQRT_2));
        let a1 = estimate_a(&base, [0.0, 0.0], 1200, &rng).unwrap();
        let a2 = estimate_a(&loud, [0.0, 0.0], 1200, &rng).unwrap();
        let ratio_se = 3.0 * (2.0 * a2.se[1][1] + 2.0 * a1.se[1][1]);
        assert!(
            (a2.a[1][1] - 2.0 * a1.a[1][1]).abs() < ratio_se + 0.05,
            "{} vs 2 x {}",
            a2.a[1][1],
            a1.a[1][1]
        );
    }

    #[test]
    fn diffusivity_agrees_with_spectral_gradients() {
        // The Galerkin corrector turns the diffusivity into an exact
        // coefficient-space inner product; the pathwise estimator must
        // reproduce it within error bars.
        let modes = varied_modes_2();
        let y = [0.2, -0.15];
        let chis = [
            galerkin_solve_chi(&modes, y, 0, 8).unwrap(),
            galerkin_solve_chi(&modes, y, 1, 8).unwrap(),
        ];
        let nn = modes.n();
        let mut exact = [[0.0; 2]; 2];
        for q in 0..2 {
            for r in 0..2 {
                let mut acc = 0.0;
                for i in 0..nn {
                    let wgt = 2.0 * modes.alpha(i, y) * modes.sigma(i, y).powi(2);
                    let gq_a = chis[q].basis.diff_coord(&chis[q].coeffs, i);
                    let gr_a = chis[r].basis.diff_coord(&chis[r].coeffs, i);
                    let gq_b = chis[q].basis.diff_coord(&chis[q].coeffs, nn + i);
                    let gr_b = chis[r].basis.diff_coord(&chis[r].coeffs, nn + i);
                    acc += wgt * (gq_a.dot(&gr_a) + gq_b.dot(&gr_b));
                }
                exact[q][r] = acc;
            }
        }
        let rng = RngStream::root(107);
        let est = estimate_a(&modes, y, 3000, &rng).unwrap();
        for q in 0..2 {
            for r in 0..2 {
                assert!(
                    (est.a[q][r] - exact[q][r]).abs() < 3.0 * est.se[q][r] + 0.02,
                    "A[{q}][{r}] {} vs spectral {}",
                    est.a[q][r],
                    exact[q][r]
                );
            }
        }
        // Non-degeneracy at a generic point.
        let det = est.a[0][0] * est.a[1][1] - est.a[0][1] * est.a[1][0];
        assert!(det > 0.0 && est.a[0][0] > 0.0);
    }

    #[test]
    fn drift_vanishes_identically_for_flat_profiles() {
        // Flat profiles short-circuit the covariation term and the
        // common-noise finite difference is exactly zero pathwise.
        let modes = single_mode(const_profile(1.2), const_profile(0.9));
        let rng = RngStream::root(109);
        let est = estimate_b(&modes, [0.4, -0.2], 200, &rng).unwrap();
        assert_eq!(est.b, [0.0, 0.0]);
        assert_eq!(est.se, [0.0, 0.0]);
        assert_eq!(est.terms.theta, [0.0, 0.0]);
    }

    #[test]
    fn drift_matches_rate_only_closed_form() {
        // With sigma flat, B = (0, -sigma² (d alpha/d y_2)/alpha²).
        let alpha = Profile::Logistic {
            lo: 0.6,
            hi: 1.8,
            v: [0.9, 0.4],
            c: 0.1,
        };
        let modes = single_mode(alpha.clone(), const_profile(1.0));
        let y = [0.1, -0.3];
        let a_val = alpha.value(y);
        let a_grad = alpha.grad(y);
        let expect = -a_grad[1] / (a_val * a_val);
        let rng = RngStream::root(113);
        let est = estimate_b(&modes, y, 2000, &rng).unwrap();
        assert_eq!(est.terms.theta, [0.0, 0.0]);
        assert!(
            est.b[0].abs() < 3.0 * est.se[0] + 1e-3,
            "B1 {} ± {}",
            est.b[0],
            est.se[0]
        );
        assert!(
            (est.b[1] - expect).abs() < 3.0 * est.se[1] + 2e-3,
            "B2 {} ± {} vs {expect}",
            est.b[1],
            est.se[1]
        );
    }

    #[test]
    fn drift_matches_divergence_form_closed_form() {
        // Both profiles varying: B_2 = (1/2) d/dy_2 (2 sigma²/alpha)
        //   = 2 sigma sigma_{y2}/alpha - sigma² alpha_{y2}/alpha².
        let alpha = Profile::Logistic {
            lo: 0.6,
            hi: 1.8,
            v: [0.9, 0.4],
            c: 0.1,
        };
        let sigma = Profile::Logistic {
            lo: 0.7,
            hi: 1.6,
            v: [-0.4, 0.8],
            c: -0.1,
        };
        let modes = single_mode(alpha.clone(), sigma.clone());
        let y = [0.1, -0.3];
        let (av, ag) = (alpha.value(y), alpha.grad(y));
        let (sv, sg) = (sigma.value(y), sigma.grad(y));
        let expect_theta = 2.0 * sv * sg[1] / av;
        let expect = expect_theta - sv * sv * ag[1] / (av * av);
        let rng = RngStream::root(127);
        let est = estimate_b(&modes, y, 4000, &rng).unwrap();
        assert!(
            (est.b[1] - expect).abs() < 3.0 * est.se[1] + 5e-3,
            "B2 {} ± {} vs {expect}",
            est.b[1],
            est.se[1]
        );
        assert!(est.b[0].abs() < 3.0 * est.se[0] + 1e-3);
        // The covariation part alone carries the sigma-derivative piece.
        assert!(
            (est.terms.theta[1] - expect_theta).abs() < 0.15 * expect_theta.abs() + 0.05,
            "theta term {} vs {expect_theta}",
            est.terms.theta[1]
        );
    }

    #[test]
    fn drift_is_equivariant_under_reflection() {
        // Reflecting the profiles and negating y flips the drift exactly:
        // the shared streams make the two assemblies bitwise mirrors.
        let modes = varied_modes_2();
        let y = [0.3, -0.2];
        let reflected = modes.reflect();
        let neg_y = [-y[0], -y[1]];
        let rng = RngStream::root(131);
        let fwd = estimate_b(&modes, y, 150, &rng).unwrap();
        let rev = estimate_b(&reflected, neg_y, 150, &rng).unwrap();
        for q in 0..2 {
            assert!(
                (fwd.b[q] + rev.b[q]).abs() < 1e-12,
                "q={q}: {} vs {}",
                fwd.b[q],
                rev.b[q]
            );
        }
    }

    #[test]
    fn flat_profiles_give_position_independent_coefficients() {
        let modes = single_mode(const_profile(1.1), const_profile(1.3));
        let rng = RngStream::root(137);
        let at_origin = estimate_a(&modes, [0.0, 0.0], 400, &rng).unwrap();
        let far = estimate_a(&modes, [2.0, -1.5], 400, &rng).unwrap();
        for q in 0..2 {
            for r in 0..2 {
                assert_eq!(at_origin.a[q][r], far.a[q][r]);
            }
        }
    }

    #[test]
    fn tabulation_is_deterministic_and_reduces_to_point_estimates() {
        let modes = varied_modes_2();
        let cfg = EffectiveConfig {
            n_probes: 60,
            ..EffectiveConfig::default()
        };
        let rng = RngStream::root(139);
        let grid1 = tabulate_effective(&modes, &[-0.5, 0.5], &[0.0, 0.6], &cfg, &rng).unwrap();
        let grid2 = tabulate_effective(&modes, &[-0.5, 0.5], &[0.0, 0.6], &cfg, &rng).unwrap();
        for (p1, p2) in grid1.points.iter().zip(&grid2.points) {
            assert_eq!(p1.b, p2.b);
            assert_eq!(p1.a, p2.a);
        }
        let single = tabulate_effective(&modes, &[0.5], &[0.6], &cfg, &rng).unwrap();
        let direct = estimate_effective(&modes, [0.5, 0.6], &cfg, &rng.child(0)).unwrap();
        assert_eq!(single.points[0].b, direct.b);
        assert_eq!(single.points[0].a, direct.a);
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_clamps() {
        let modes = varied_modes_2();
        let cfg = EffectiveConfig {
            n_probes: 40,
            ..EffectiveConfig::default()
        };
        let rng = RngStream::root(149);
        let model =
            tabulate_effective(&modes, &[-1.0, 0.0, 1.0], &[-1.0, 1.0], &cfg, &rng).unwrap();
        let (b, a) = model.interpolate([0.0, -1.0]);
        let node = model.at(1, 0);
        assert_eq!(b, node.b);
        assert_eq!(a, node.a);
        // Clamping far outside the box returns the corner.
        let (bc, _) = model.interpolate([50.0, -50.0]);
        assert_eq!(bc, model.at(2, 0).b);
        // Midpoints average the adjacent nodes.
        let (bm, _) = model.interpolate([-0.5, -1.0]);
        assert!((bm[0] - 0.5 * (model.at(0, 0).b[0] + model.at(1, 0).b[0])).abs() < 1e-14);
    }

    #[test]
    fn default_modes_are_nondegenerate_across_the_grid() {
        let modes = ModeSet::default_constant();
        let rng = RngStream::root(151);
        for (ix, y) in [[-1.0, 0.5], [0.0, 0.0], [1.0, -0.5]].iter().enumerate() {
            let est = estimate_a(&modes, *y, 500, &rng.child(ix as u64)).unwrap();
            let tr = est.a[0][0] + est.a[1][1];
            let det = est.a[0][0] * est.a[1][1] - est.a[0][1] * est.a[1][0];
            let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
            assert!(min_eig > 0.0, "min eigenvalue {min_eig} at {y:?}");
        }
    }

    #[test]
    fn smoothness_of_tabulated_diffusivity() {
        // Finite differences across a coarse grid are stable when the
        // probe count doubles.
        let alpha = Profile::Logistic {
            lo: 0.7,
            hi: 1.5,
            v: [0.8, 0.0],
            c: 0.0,
        };
        let modes = single_mode(alpha, const_profile(1.0));
        let rng = RngStream::root(157);
        let xs = [-0.4, 0.0, 0.4];
        let mut fds = Vec::new();
        for (trial, n) in [400usize, 800].iter().enumerate() {
            let cfg = EffectiveConfig {
                n_probes: *n,
                ..EffectiveConfig::default()
            };
            let model =
                tabulate_effective(&modes, &xs, &[0.0], &cfg, &rng.child(trial as u64)).unwrap();
            let fd = (model.at(2, 0).a[1][1] - model.at(0, 0).a[1][1]) / 0.8;
            let se = (model.at(2, 0).a_se[1][1].powi(2) + model.at(0, 0).a_se[1][1].powi(2))
                .sqrt()
                / 0.8;
            fds.push((fd, se));
        }
        let expect_mag = 2.0 / 0.7; // |A22| scale over the window
        assert!(fds[0].0.abs() < expect_mag, "fd {fds:?}");
        // Absolute floor covers the zero-variance case where every probe
        // of a single-mode model returns the identical deterministic value.
        let gap = (fds[0].0 - fds[1].0).abs();
        assert!(
            gap < 3.0 * (fds[0].1 + fds[1].1) + 1e-10,
            "fd drifted under refinement: {fds:?}"
        );
    }
}
