//! Hermite–Galerkin discretization of the frozen-cell generator.
//!
//! The basis is the tensor product of probabilists' Hermite functions
//! `phi_n(x) = He_n(x/sigma)/sqrt(n!)`, orthonormal under the invariant
//! Gaussian `nu` with per-coordinate scales `sigma_i(y)`. On this basis the
//! OU part of the generator is diagonal with eigenvalue
//! `-sum_i alpha_i (deg a_i + deg b_i)`, and the advection part `w · D` is
//! exactly antisymmetric, so the symmetric part of `-L` restricted to
//! mean-zero functions is a diagonal matrix bounded below by `gamma0`. The
//! truncated solve is therefore nonsingular for any degree that can
//! represent the right side at all.

use crate::error::{Error, Result};
use crate::field::{cross, perp, ModeSet, PhasePoint, Vec2};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// Largest supported basis dimension; beyond this the dense solve and the
/// combinatorics stop being an oracle and start being a liability.
const MAX_BASIS_DIM: usize = 4096;

/// Tensor Hermite basis over the 2N amplitude coordinates (a's then b's),
/// truncated by total degree.
#[derive(Clone, Debug)]
pub struct HermiteBasis {
    pub n_modes: usize,
    pub degree: u8,
    /// Per-coordinate Gaussian scales, length 2N.
    pub sigmas: Vec<f64>,
    /// Multi-indices in graded order; the constant function is first.
    pub indices: Vec<Vec<u8>>,
    map: HashMap<Vec<u8>, usize>,
}

fn enumerate_indices(n_coords: usize, degree: u8) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut current = vec![0u8; n_coords];
    for total in 0..=degree {
        fill(&mut out, &mut current, 0, total);
    }
    return out;

    fn fill(out: &mut Vec<Vec<u8>>, current: &mut Vec<u8>, pos: usize, remaining: u8) {
        if pos == current.len() - 1 {
            current[pos] = remaining;
            out.push(current.clone());
            current[pos] = 0;
            return;
        }
        for d in 0..=remaining {
            current[pos] = d;
            fill(out, current, pos + 1, remaining - d);
        }
        current[pos] = 0;
    }
}

impl HermiteBasis {
    pub fn new(modes: &ModeSet, y: Vec2, degree: u8) -> Result<Self> {
        let n = modes.n();
        if n > 3 {
            return Err(Error::invalid(
                "Galerkin basis supports at most three modes",
            ));
        }
        let indices = enumerate_indices(2 * n, degree);
        if indices.len() > MAX_BASIS_DIM {
            return Err(Error::invalid(format!(
                "basis dimension {} exceeds {MAX_BASIS_DIM}; reduce the degree or mode count",
                indices.len()
            )));
        }
        let mut sigmas = Vec::with_capacity(2 * n);
        for i in 0..n {
            sigmas.push(modes.sigma(i, y));
        }
        for i in 0..n {
            sigmas.push(modes.sigma(i, y));
        }
        let map = indices
            .iter()
            .enumerate()
            .map(|(l, idx)| (idx.clone(), l))
            .collect();
        Ok(Self {
            n_modes: n,
            degree,
            sigmas,
            indices,
            map,
        })
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn index_of(&self, idx: &[u8]) -> Option<usize> {
        self.map.get(idx).copied()
    }

    /// Re-expresses coefficients in a basis of at least this degree over
    /// the same coordinates.
    pub fn embed(&self, v: &DVector<f64>, bigger: &HermiteBasis) -> DVector<f64> {
        let mut out = DVector::zeros(bigger.dim());
        for (l, idx) in self.indices.iter().enumerate() {
            if v[l] != 0.0 {
                let tgt = bigger
                    .index_of(idx)
                    .expect("embedding target must contain the source basis");
                out[tgt] = v[l];
            }
        }
        out
    }

    /// Multiplication by the coordinate `x_c`:
    /// `x phi_n = sigma (sqrt(n+1) phi_{n+1} + sqrt(n) phi_{n-1})`.
    /// Components beyond the degree cap are dropped, which is exactly the
    /// Galerkin projection of the product.
    pub fn mul_coord(&self, v: &DVector<f64>, c: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let sigma = self.sigmas[c];
        let mut idx = Vec::new();
        for (l, ix) in self.indices.iter().enumerate() {
            if v[l] == 0.0 {
                continue;
            }
            let n_c = ix[c];
            idx.clone_from(ix);
            if n_c > 0 {
                idx[c] = n_c - 1;
                let tgt = self.map[&idx];
                out[tgt] += sigma * (n_c as f64).sqrt() * v[l];
                idx[c] = n_c;
            }
            idx[c] = n_c + 1;
            if let Some(&tgt) = self.map.get(&idx) {
                out[tgt] += sigma * ((n_c + 1) as f64).sqrt() * v[l];
            }
            idx[c] = n_c;
        }
        out
    }

    /// Differentiation in the coordinate `x_c`:
    /// `d/dx phi_n = (sqrt(n)/sigma) phi_{n-1}`.
    pub fn diff_coord(&self, v: &DVector<f64>, c: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let sigma = self.sigmas[c];
        let mut idx = Vec::new();
        for (l, ix) in self.indices.iter().enumerate() {
            if v[l] == 0.0 || ix[c] == 0 {
                continue;
            }
            let n_c = ix[c];
            idx.clone_from(ix);
            idx[c] = n_c - 1;
            let tgt = self.map[&idx];
            out[tgt] += (n_c as f64).sqrt() / sigma * v[l];
        }
        out
    }

    /// The per-mode rotation `R_i = b_i d/da_i - a_i d/db_i`.
    pub fn rotation_apply(&self, v: &DVector<f64>, i: usize) -> DVector<f64> {
        let n = self.n_modes;
        self.mul_coord(&self.diff_coord(v, i), n + i)
            - self.mul_coord(&self.diff_coord(v, n + i), i)
    }

    /// Multiplication by the rotation rate `q_i = sum_j delta(k_i,k_j) b_j`.
    pub fn mul_q(&self, v: &DVector<f64>, i: usize, modes: &ModeSet) -> DVector<f64> {
        let n = self.n_modes;
        let mut out = DVector::zeros(self.dim());
        for j in 0..n {
            let d = cross(modes.modes[i].k, modes.modes[j].k);
            if d != 0.0 {
                out += d * self.mul_coord(v, n + j);
            }
        }
        out
    }

    /// Multiplication by the drift component `w_j = sum_i (k_i^perp)_j b_i`.
    pub fn mul_w_component(&self, v: &DVector<f64>, j: usize, modes: &ModeSet) -> DVector<f64> {
        let n = self.n_modes;
        let mut out = DVector::zeros(self.dim());
        for i in 0..n {
            let kp = perp(modes.modes[i].k)[j];
            if kp != 0.0 {
                out += kp * self.mul_coord(v, n + i);
            }
        }
        out
    }

    /// The advection part `(w · D) F = sum_i q_i R_i F`.
    pub fn advection_apply(&self, v: &DVector<f64>, modes: &ModeSet) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.n_modes {
            out += self.mul_q(&self.rotation_apply(v, i), i, modes);
        }
        out
    }

    /// The full generator `L = OU + w · D` applied to a coefficient vector.
    pub fn generator_apply(&self, v: &DVector<f64>, modes: &ModeSet, y: Vec2) -> DVector<f64> {
        let n = self.n_modes;
        let mut out = self.advection_apply(v, modes);
        for (l, idx) in self.indices.iter().enumerate() {
            if v[l] != 0.0 {
                let rate: f64 = (0..n)
                    .map(|i| modes.alpha(i, y) * (idx[i] + idx[n + i]) as f64)
                    .sum();
                out[l] -= rate * v[l];
            }
        }
        out
    }

    /// Coefficients of the drift component `w_q` (a degree-one function).
    pub fn coeffs_w_q(&self, modes: &ModeSet, q: usize) -> DVector<f64> {
        let n = self.n_modes;
        let mut out = DVector::zeros(self.dim());
        let mut idx = vec![0u8; 2 * n];
        for i in 0..n {
            let kp = perp(modes.modes[i].k)[q];
            if kp != 0.0 {
                idx[n + i] = 1;
                if let Some(&l) = self.map.get(&idx) {
                    out[l] = kp * self.sigmas[n + i];
                }
                idx[n + i] = 0;
            }
        }
        out
    }

    /// Normalized Hermite values `phi_0..phi_degree` at `u = x/sigma`.
    fn hermite_column(&self, c: usize, x: f64) -> Vec<f64> {
        let u = x / self.sigmas[c];
        let d = self.degree as usize;
        let mut col = vec![0.0; d + 1];
        col[0] = 1.0;
        if d >= 1 {
            col[1] = u;
        }
        for m in 1..d {
            col[m + 1] = (u * col[m] - (m as f64).sqrt() * col[m - 1]) / ((m + 1) as f64).sqrt();
        }
        col
    }

    /// Evaluates the expansion at a phase point.
    pub fn eval(&self, v: &DVector<f64>, p: &PhasePoint) -> f64 {
        let n = self.n_modes;
        let cols: Vec<Vec<f64>> = (0..2 * n)
            .map(|c| {
                let x = if c < n { p.a[c] } else { p.b[c - n] };
                self.hermite_column(c, x)
            })
            .collect();
        let mut acc = 0.0;
        for (l, idx) in self.indices.iter().enumerate() {
            if v[l] == 0.0 {
                continue;
            }
            let mut prod = v[l];
            for (c, &d) in idx.iter().enumerate() {
                prod *= cols[c][d as usize];
            }
            acc += prod;
        }
        acc
    }
}

/// Assembles the matrix of `-L` on the basis (columns are images of basis
/// functions).
pub fn minus_generator_matrix(basis: &HermiteBasis, modes: &ModeSet, y: Vec2) -> DMatrix<f64> {
    let dim = basis.dim();
    let mut m = DMatrix::zeros(dim, dim);
    let mut e = DVector::zeros(dim);
    for col in 0..dim {
        e.fill(0.0);
        e[col] = 1.0;
        let img = basis.generator_apply(&e, modes, y);
        for row in 0..dim {
            m[(row, col)] = -img[row];
        }
    }
    m
}

/// A Galerkin solution with cached derivative expansions.
#[derive(Clone, Debug)]
pub struct GalerkinCorrector {
    pub basis: HermiteBasis,
    pub coeffs: DVector<f64>,
    pub y: Vec2,
    grad_coeffs: Vec<DVector<f64>>,
}

impl GalerkinCorrector {
    pub fn from_coeffs(basis: HermiteBasis, coeffs: DVector<f64>, y: Vec2) -> Self {
        let grad_coeffs = (0..2 * basis.n_modes)
            .map(|c| basis.diff_coord(&coeffs, c))
            .collect();
        Self {
            basis,
            coeffs,
            y,
            grad_coeffs,
        }
    }

    pub fn eval(&self, p: &PhasePoint) -> f64 {
        self.basis.eval(&self.coeffs, p)
    }

    /// Gradient over the 2N amplitude coordinates (a's then b's).
    pub fn grad(&self, p: &PhasePoint) -> Vec<f64> {
        self.grad_coeffs
            .iter()
            .map(|g| self.basis.eval(g, p))
            .collect()
    }

    pub fn partial(&self, c: usize, p: &PhasePoint) -> f64 {
        self.basis.eval(&self.grad_coeffs[c], p)
    }
}

/// Solves `-L chi_q = w_q` on the mean-zero block of the degree-`degree`
/// basis. The constant mode decouples (the generator annihilates it and
/// preserves mean-zero), so the restricted system is positive definite in
/// its symmetric part and the solve cannot be singular; a degree too small
/// to represent the data is reported instead.
pub fn galerkin_solve_chi(
    modes: &ModeSet,
    y: Vec2,
    q: usize,
    degree: u8,
) -> Result<GalerkinCorrector> {
    if q >= 2 {
        return Err(Error::invalid("direction index must be 0 or 1"));
    }
    if degree < 1 {
        return Err(Error::invalid(
            "degree 0 cannot represent the drift; increase the basis degree",
        ));
    }
    let basis = HermiteBasis::new(modes, y, degree)?;
    let dim = basis.dim();
    let full = minus_generator_matrix(&basis, modes, y);
    let rhs_full = basis.coeffs_w_q(modes, q);
    // Restrict to the mean-zero block (indices 1..).
    let sub = full.view((1, 1), (dim - 1, dim - 1)).into_owned();
    let rhs = rhs_full.rows(1, dim - 1).into_owned();
    let lu = sub.lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        Error::numerical("Galerkin system is singular; increase the basis degree")
    })?;
    let mut coeffs = DVector::zeros(dim);
    coeffs.rows_mut(1, dim - 1).copy_from(&sol);
    Ok(GalerkinCorrector::from_coeffs(basis, coeffs, y))
}

/// Solves the coupled pair
/// `[L - alpha_i] T1 - q_i T2 = F`, `[L - alpha_i] T2 + q_i T1 = G`
/// on the full degree-`degree` basis. `f` and `g` are coefficient vectors
/// in that basis. Returns the coefficient vectors of `(T1, T2)`.
pub fn galerkin_solve_theta(
    modes: &ModeSet,
    y: Vec2,
    i: usize,
    f: &DVector<f64>,
    g: &DVector<f64>,
    basis: &HermiteBasis,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if i >= modes.n() {
        return Err(Error::invalid("mode index out of range"));
    }
    let dim = basis.dim();
    if f.len() != dim || g.len() != dim {
        return Err(Error::invalid("right-side coefficients must match the basis"));
    }
    let alpha = modes.alpha(i, y);
    let gen = -minus_generator_matrix(basis, modes, y);
    let mut qmat = DMatrix::zeros(dim, dim);
    let mut e = DVector::zeros(dim);
    for col in 0..dim {
        e.fill(0.0);
        e[col] = 1.0;
        let img = basis.mul_q(&e, i, modes);
        for row in 0..dim {
            qmat[(row, col)] = img[row];
        }
    }
    let mut block = DMatrix::zeros(2 * dim, 2 * dim);
    for r in 0..dim {
        for c in 0..dim {
            let lmba = gen[(r, c)] - if r == c { alpha } else { 0.0 };
            block[(r, c)] = lmba;
            block[(dim + r, dim + c)] = lmba;
            block[(r, dim + c)] = -qmat[(r, c)];
            block[(dim + r, c)] = qmat[(r, c)];
        }
    }
    let mut rhs = DVector::zeros(2 * dim);
    rhs.rows_mut(0, dim).copy_from(f);
    rhs.rows_mut(dim, dim).copy_from(g);
    let sol = block
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("coupled Galerkin system is singular; increase the basis degree"))?;
    Ok((
        sol.rows(0, dim).into_owned(),
        sol.rows(dim, dim).into_owned(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{corrector_chi, corrector_theta, AuxState};
    use crate::field::{sample_invariant, Mode, Profile};
    use crate::metrics::gauss_hermite;
    use crate::rng::RngStream;
    use crate::testutil::varied_modes_2;

    fn single_mode(alpha: f64, sigma: f64) -> ModeSet {
        ModeSet::new(
            0.5,
            0.5,
            vec![Mode {
                k: [1.0, 0.0],
                alpha: Profile::Constant { value: alpha },
                sigma: Profile::Constant { value: sigma },
            }],
        )
        .unwrap()
    }

    #[test]
    fn basis_dimension_matches_combinatorics() {
        let modes2 = varied_modes_2();
        let b = HermiteBasis::new(&modes2, [0.0, 0.0], 8).unwrap();
        assert_eq!(b.dim(), 495);
        let modes3 = ModeSet::default_constant();
        let b3 = HermiteBasis::new(&modes3, [0.0, 0.0], 6).unwrap();
        assert_eq!(b3.dim(), 924);
        assert!(HermiteBasis::new(&modes3, [0.0, 0.0], 10).is_err());
    }

    #[test]
    fn basis_is_orthonormal_under_gaussian_quadrature() {
        let modes = single_mode(1.0, 0.8);
        let basis = HermiteBasis::new(&modes, [0.0, 0.0], 4).unwrap();
        let (nodes, weights) = gauss_hermite(12).unwrap();
        let dim = basis.dim();
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        for (ia, &xa) in nodes.iter().enumerate() {
            for (ib, &xb) in nodes.iter().enumerate() {
                let p = PhasePoint {
                    a: vec![basis.sigmas[0] * xa],
                    b: vec![basis.sigmas[1] * xb],
                };
                let w = weights[ia] * weights[ib];
                let mut vals = vec![0.0; dim];
                let mut e = DVector::zeros(dim);
                for l in 0..dim {
                    e.fill(0.0);
                    e[l] = 1.0;
                    vals[l] = basis.eval(&e, &p);
                }
                for r in 0..dim {
                    for c in 0..dim {
                        gram[(r, c)] += w * vals[r] * vals[c];
                    }
                }
            }
        }
        for r in 0..dim {
            for c in 0..dim {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (gram[(r, c)] - expect).abs() < 1e-9,
                    "gram[{r},{c}] = {}",
                    gram[(r, c)]
                );
            }
        }
    }

    #[test]
    fn multiplication_and_differentiation_are_gaussian_adjoint() {
        // Integration by parts under nu: the adjoint of d/dx is
        // x/sigma² - d/dx, which on coefficients reads
        // D^T = M/sigma² - D exactly.
        let modes = varied_modes_2();
        let y = [0.3, -0.1];
        let basis = HermiteBasis::new(&modes, y, 6).unwrap();
        let dim = basis.dim();
        let mut rng = RngStream::root(11);
        for c in 0..4 {
            let v = DVector::from_fn(dim, |_, _| rng.normal());
            let u = DVector::from_fn(dim, |_, _| rng.normal());
            let lhs = basis.diff_coord(&v, c).dot(&u);
            let rhs = v.dot(
                &(basis.mul_coord(&u, c) / basis.sigmas[c].powi(2) - basis.diff_coord(&u, c)),
            );
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn generator_preserves_the_invariant_mean() {
        // Row zero of the generator matrix is the nu-mean of L applied to
        // each basis function; it vanishes identically.
        let modes = varied_modes_2();
        let y = [-0.2, 0.4];
        let basis = HermiteBasis::new(&modes, y, 6).unwrap();
        let m = minus_generator_matrix(&basis, &modes, y);
        for col in 0..basis.dim() {
            assert!(m[(0, col)].abs() < 1e-12, "col {col}: {}", m[(0, col)]);
        }
    }

    #[test]
    fn advection_matrix_is_antisymmetric() {
        let modes = varied_modes_2();
        let y = [0.1, 0.2];
        let basis = HermiteBasis::new(&modes, y, 6).unwrap();
        let dim = basis.dim();
        let mut w = DMatrix::<f64>::zeros(dim, dim);
        let mut e = DVector::zeros(dim);
        for col in 0..dim {
            e.fill(0.0);
            e[col] = 1.0;
            let img = basis.advection_apply(&e, &modes);
            for row in 0..dim {
                w[(row, col)] = img[row];
            }
        }
        let mut worst: f64 = 0.0;
        for r in 0..dim {
            for c in 0..dim {
                worst = worst.max((w[(r, c)] + w[(c, r)]).abs());
            }
        }
        assert!(worst < 1e-10, "skew defect {worst}");
    }

    #[test]
    fn symmetric_part_has_spectral_gap() {
        // The symmetric part of -L on mean-zero functions is the diagonal
        // of OU rates, bounded below by gamma0.
        for (modes, y, deg) in [
            (varied_modes_2(), [0.25, -0.35], 10u8),
            (single_mode(0.52, 1.0), [0.0, 0.0], 10u8),
        ] {
            let basis = HermiteBasis::new(&modes, y, deg).unwrap();
            let m = minus_generator_matrix(&basis, &modes, y);
            let dim = basis.dim();
            let sub = m.view((1, 1), (dim - 1, dim - 1)).into_owned();
            let sym = 0.5 * (&sub + sub.transpose());
            let eigs = sym.symmetric_eigenvalues();
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(
                min >= modes.gamma0 - 1e-9,
                "min eigenvalue {min} below gap {}",
                modes.gamma0
            );
        }
    }

    #[test]
    fn single_mode_corrector_is_exact_at_any_degree() {
        // chi_2 = -b/alpha has a one-term expansion; every degree >= 1
        // reproduces it to rounding.
        let modes = single_mode(1.3, 0.9);
        let mut rng = RngStream::root(3);
        for &deg in &[1u8, 4, 9] {
            let chi = galerkin_solve_chi(&modes, [0.0, 0.0], 1, deg).unwrap();
            for _ in 0..10 {
                let p = sample_invariant(&modes, [0.0, 0.0], &mut rng);
                let expect = -p.b[0] / 1.3;
                assert!(
                    (chi.eval(&p) - expect).abs() < 1e-12,
                    "deg {deg}: {} vs {expect}",
                    chi.eval(&p)
                );
            }
            // chi_1 vanishes for k = (1, 0).
            let chi1 = galerkin_solve_chi(&modes, [0.0, 0.0], 0, deg).unwrap();
            assert!(chi1.coeffs.amax() < 1e-14);
        }
    }

    #[test]
    fn degree_zero_reports_underresolved_basis() {
        let modes = single_mode(1.0, 1.0);
        let err = galerkin_solve_chi(&modes, [0.0, 0.0], 1, 0).unwrap_err();
        assert!(err.to_string().contains("increase the basis degree"));
    }

    #[test]
    fn two_mode_corrector_converges_in_degree() {
        let modes = varied_modes_2();
        let y = [0.2, -0.1];
        let solutions: Vec<_> = [2u8, 4, 6, 8, 10]
            .iter()
            .map(|&d| galerkin_solve_chi(&modes, y, 1, d).unwrap())
            .collect();
        let mut diffs = Vec::new();
        for w in solutions.windows(2) {
            let big = &w[1].basis;
            let emb = w[0].basis.embed(&w[0].coeffs, big);
            diffs.push((&w[1].coeffs - emb).norm());
        }
        // Geometric decay of the spectral tail: every refinement shrinks
        // the correction by a definite factor.
        for w in diffs.windows(2) {
            assert!(w[1] < 0.6 * w[0], "successive differences {diffs:?}");
        }
        assert!(diffs.last().unwrap() < &8e-3, "tail difference {diffs:?}");
    }

    #[test]
    fn galerkin_and_monte_carlo_correctors_agree() {
        let modes = varied_modes_2();
        let y = [0.15, 0.3];
        let chi = galerkin_solve_chi(&modes, y, 1, 8).unwrap();
        let parent = RngStream::root(41);
        let mut rng = parent.child(0);
        let tol = 2e-3;
        for probe in 0..10 {
            let p = sample_invariant(&modes, y, &mut rng);
            let mc = corrector_chi(1, &p, y, tol, 1500, &modes, &parent.child(100 + probe)).unwrap();
            let gal = chi.eval(&p);
            assert!(
                (mc.value - gal).abs() < 3.0 * (mc.std_err + tol),
                "probe {probe}: mc {} ± {} vs galerkin {gal}",
                mc.value,
                mc.std_err
            );
        }
    }

    #[test]
    fn corrector_satisfies_dynkin_identity_with_two_modes() {
        // E[chi(ã_t) - chi(𝔞) + ∫_0^t w_q ds] = 0 with the Galerkin
        // corrector as the exact reference function.
        let modes = varied_modes_2();
        let y = [0.0, 0.2];
        let chi = galerkin_solve_chi(&modes, y, 1, 8).unwrap();
        let kperp: Vec<f64> = modes.modes.iter().map(|m| perp(m.k)[1]).collect();
        let parent = RngStream::root(53);
        let t = 1.0;
        let dt: f64 = 2e-3;
        let n_steps = (t / dt).round() as usize;
        let n = 4000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for s in 0..n {
            let mut rng = parent.child(s);
            let p0 = sample_invariant(&modes, y, &mut rng);
            let mut st = AuxState {
                phase: p0.clone(),
                y,
            };
            let wq = |p: &PhasePoint| -> f64 {
                kperp.iter().zip(&p.b).map(|(kp, b)| kp * b).sum()
            };
            let mut integral = 0.0;
            let mut prev = wq(&st.phase);
            for _ in 0..n_steps {
                crate::cell::aux_step(&mut st, dt, &modes, &mut rng);
                let new = wq(&st.phase);
                integral += 0.5 * dt * (prev + new);
                prev = new;
            }
            let resid = chi.eval(&st.phase) - chi.eval(&p0) + integral;
            s1 += resid;
            s2 += resid * resid;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se + 2e-3, "residual {mean} ± {se}");
    }

    #[test]
    fn theta_solve_has_small_residual_and_matches_resolvent() {
        let modes = varied_modes_2();
        let y = [-0.1, 0.25];
        let deg = 9u8;
        let basis = HermiteBasis::new(&modes, y, deg).unwrap();
        let big = HermiteBasis::new(&modes, y, deg + 1).unwrap();
        // A linear right side with both components active.
        let f = basis.coeffs_w_q(&modes, 1);
        let g = 0.5 * basis.coeffs_w_q(&modes, 0);
        let i = 0;
        let (t1, t2) = galerkin_solve_theta(&modes, y, i, &f, &g, &basis).unwrap();
        // Residual of the untruncated operator, evaluated exactly in the
        // degree+1 space.
        let alpha = modes.alpha(i, y);
        let t1b = basis.embed(&t1, &big);
        let t2b = basis.embed(&t2, &big);
        let r1 = big.generator_apply(&t1b, &modes, y)
            - alpha * &t1b
            - big.mul_q(&t2b, i, &modes)
            - basis.embed(&f, &big);
        let r2 = big.generator_apply(&t2b, &modes, y) - alpha * &t2b + big.mul_q(&t1b, i, &modes)
            - basis.embed(&g, &big);
        let fn_norm = f.norm().max(g.norm());
        assert!(r1.norm() <= 0.05 * fn_norm, "residual {} vs {}", r1.norm(), fn_norm);
        assert!(r2.norm() <= 0.05 * fn_norm, "residual {} vs {}", r2.norm(), fn_norm);
        // The damped-oscillatory resolvent estimates -T at probe points.
        let parent = RngStream::root(67);
        let mut rng = parent.child(9);
        let fb = f.clone();
        let gb = g.clone();
        let f_fn = |p: &PhasePoint| basis.eval(&fb, p);
        let g_fn = |p: &PhasePoint| basis.eval(&gb, p);
        let scale = fn_norm / alpha;
        for probe in 0..3 {
            let p = sample_invariant(&modes, y, &mut rng);
            let est = corrector_theta(
                i,
                &f_fn,
                &g_fn,
                &p,
                y,
                1e-3,
                2000,
                &modes,
                &parent.child(200 + probe),
            )
            .unwrap();
            let g1 = -basis.eval(&t1, &p);
            let g2 = -basis.eval(&t2, &p);
            assert!(
                (est.theta1 - g1).abs() < 3.0 * est.std_err + 0.05 * scale,
                "probe {probe}: {} vs {g1}",
                est.theta1
            );
            assert!(
                (est.theta2 - g2).abs() < 3.0 * est.std_err + 0.05 * scale,
                "probe {probe}: {} vs {g2}",
                est.theta2
            );
        }
    }

    #[test]
    fn theta_rejects_mismatched_inputs() {
        let modes = varied_modes_2();
        let y = [0.0, 0.0];
        let basis = HermiteBasis::new(&modes, y, 4).unwrap();
        let f = DVector::zeros(3);
        let g = DVector::zeros(basis.dim());
        assert!(galerkin_solve_theta(&modes, y, 0, &f, &g, &basis).is_err());
        assert!(galerkin_solve_theta(&modes, y, 5, &g, &g, &basis).is_err());
    }
}
