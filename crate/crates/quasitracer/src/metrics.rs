//! Distributional diagnostics: exact 1-d Wasserstein-1 between empirical
//! samples, sliced Wasserstein-1 for planar clouds, Kolmogorov–Smirnov
//! statistics, batched moment summaries, and Gauss–Hermite quadrature.

use crate::error::{Error, Result};
use crate::field::Vec2;
use nalgebra::DMatrix;
use serde::Serialize;

/// Exact W1 between two empirical distributions (any sample sizes): the
/// integral of |F_a - F_b| over the merged support.
pub fn w1(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|p, q| p.total_cmp(q));
    sb.sort_by(|p, q| p.total_cmp(q));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut dist = 0.0;
    let mut prev = f64::NAN;
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && x > prev {
            let fa = ia as f64 / na;
            let fb = ib as f64 / nb;
            dist += (fa - fb).abs() * (x - prev);
        }
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        prev = x;
    }
    dist
}

/// The fixed equi-angular projection directions used by sliced W1.
pub fn projection_angles(n_proj: usize) -> Vec<Vec2> {
    (0..n_proj)
        .map(|l| {
            let th = std::f64::consts::PI * l as f64 / n_proj as f64;
            [th.cos(), th.sin()]
        })
        .collect()
}

fn project(cloud: &[Vec2], dir: Vec2) -> Vec<f64> {
    cloud.iter().map(|x| x[0] * dir[0] + x[1] * dir[1]).collect()
}

/// Sliced Wasserstein-1 between planar clouds: mean of the 1-d W1 over
/// `n_proj` deterministic equi-angular directions.
pub fn sliced_w1(a: &[Vec2], b: &[Vec2], n_proj: usize) -> f64 {
    let dirs = projection_angles(n_proj);
    let total: f64 = dirs
        .iter()
        .map(|&d| w1(&project(a, d), &project(b, d)))
        .sum();
    total / n_proj as f64
}

/// Sliced W1 with a batch standard error: the point estimate uses the full
/// clouds; the SE is the spread of per-batch distances over `n_batches`
/// equal contiguous batches of both clouds (clouds kept in path-id order,
/// so batches are independent replicas).
pub fn sliced_w1_with_se(a: &[Vec2], b: &[Vec2], n_proj: usize, n_batches: usize) -> (f64, f64) {
    let point = sliced_w1(a, b, n_proj);
    let nb = n_batches.min(a.len()).min(b.len()).max(1);
    if nb < 2 {
        return (point, f64::NAN);
    }
    let mut vals = Vec::with_capacity(nb);
    for j in 0..nb {
        let sl = |c: &[Vec2]| -> Vec<Vec2> {
            let lo = c.len() * j / nb;
            let hi = c.len() * (j + 1) / nb;
            c[lo..hi].to_vec()
        };
        vals.push(sliced_w1(&sl(a), &sl(b), n_proj));
    }
    let mean = vals.iter().sum::<f64>() / nb as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nb - 1) as f64;
    (point, (var / nb as f64).sqrt())
}

/// Sample mean and covariance of a planar cloud with batch standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: Vec2,
    pub mean_se: Vec2,
    pub cov: [[f64; 2]; 2],
    pub cov_se: [[f64; 2]; 2],
}

pub fn mean_cov(cloud: &[Vec2]) -> (Vec2, [[f64; 2]; 2]) {
    let n = cloud.len() as f64;
    let mut mean = [0.0, 0.0];
    for x in cloud {
        mean[0] += x[0];
        mean[1] += x[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut cov = [[0.0; 2]; 2];
    for x in cloud {
        let d = [x[0] - mean[0], x[1] - mean[1]];
        for p in 0..2 {
            for q in 0..2 {
                cov[p][q] += d[p] * d[q];
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    (mean, cov)
}

impl MomentSummary {
    pub fn from_cloud(cloud: &[Vec2], n_batches: usize) -> MomentSummary {
        let (mean, cov) = mean_cov(cloud);
        let nb = n_batches.min(cloud.len() / 2).max(2);
        let mut bm: Vec<Vec2> = Vec::with_capacity(nb);
        let mut bc: Vec<[[f64; 2]; 2]> = Vec::with_capacity(nb);
        for j in 0..nb {
            let lo = cloud.len() * j / nb;
            let hi = cloud.len() * (j + 1) / nb;
            let (m, c) = mean_cov(&cloud[lo..hi]);
            bm.push(m);
            bc.push(c);
        }
        let spread = |vals: &[f64]| -> f64 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v =
                vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (vals.len() - 1) as f64;
            (v / vals.len() as f64).sqrt()
        };
        let mut mean_se = [0.0; 2];
        for p in 0..2 {
            let vals: Vec<f64> = bm.iter().map(|m| m[p]).collect();
            mean_se[p] = spread(&vals);
        }
        let mut cov_se = [[0.0; 2]; 2];
        for p in 0..2 {
            for q in 0..2 {
                let vals: Vec<f64> = bc.iter().map(|c| c[p][q]).collect();
                cov_se[p][q] = spread(&vals);
            }
        }
        MomentSummary {
            n: cloud.len(),
            mean,
            mean_se,
            cov,
            cov_se,
        }
    }
}

/// One-sample Kolmogorov–Smirnov distance against a reference CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|p, q| p.total_cmp(q));
    sb.sort_by(|p, q| p.total_cmp(q));
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while ia < sa.len() && ib < sb.len() {
        let x = sa[ia].min(sb[ib]);
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        d = d.max((ia as f64 / sa.len() as f64 - ib as f64 / sb.len() as f64).abs());
    }
    d
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
/// For two-sample tests pass the effective size n·m/(n+m).
pub fn ks_pvalue(d: f64, n_eff: f64) -> f64 {
    let sq = n_eff.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Gauss–Hermite rule for the standard normal weight: `E[f(X)] ≈ Σ w_i f(ξ_i)`
/// for X ~ N(0,1), exact for polynomials of degree ≤ 2n-1. Computed by
/// Golub–Welsch from the probabilists' Hermite recurrence.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("gauss_hermite: need n >= 1"));
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 1..n {
        let beta = (j as f64).sqrt();
        jac[(j - 1, j)] = beta;
        jac[(j, j - 1)] = beta;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let wsum: f64 = pairs.iter().map(|p| p.1).sum();
    Ok((
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / wsum).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn w1_known_values() {
        assert_abs_diff_eq!(w1(&[0.0], &[1.0]), 1.0);
        assert_abs_diff_eq!(w1(&[0.0, 0.0], &[1.0]), 1.0);
        assert_abs_diff_eq!(w1(&[0.0, 2.0], &[1.0]), 1.0);
        assert_abs_diff_eq!(
            w1(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]),
            1.0,
            epsilon = 1e-15
        );
        let a = [0.3, -1.2, 0.8, 2.2];
        assert_eq!(w1(&a, &a), 0.0);
        assert_abs_diff_eq!(w1(&a, &[1.5, 0.4]), w1(&[1.5, 0.4], &a), epsilon = 1e-15);
        // Translation by c moves the distance by exactly |c| for equal sizes.
        let b: Vec<f64> = a.iter().map(|x| x + 0.7).collect();
        assert_abs_diff_eq!(w1(&a, &b), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn sliced_w1_detects_shift() {
        let mut rng = RngStream::root(3);
        let n = 20_000;
        let shift = [0.8, -0.3];
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            a.push([rng.normal(), rng.normal()]);
            b.push([rng.normal() + shift[0], rng.normal() + shift[1]]);
        }
        assert_eq!(sliced_w1(&a, &a, 32), 0.0);
        // For a pure shift the per-direction W1 approaches |shift·u|; compare
        // against that average over the same fixed directions.
        let dirs = projection_angles(32);
        let expect: f64 = dirs
            .iter()
            .map(|d| (shift[0] * d[0] + shift[1] * d[1]).abs())
            .sum::<f64>()
            / 32.0;
        let got = sliced_w1(&a, &b, 32);
        assert_abs_diff_eq!(got, expect, epsilon = 0.02);
        let (point, se) = sliced_w1_with_se(&a, &b, 32, 8);
        assert_eq!(point, got);
        assert!(se > 0.0 && se < 0.05);
    }

    #[test]
    fn moment_summary_recovers_gaussian() {
        let mut rng = RngStream::root(8);
        let n = 40_000;
        let mut cloud = Vec::with_capacity(n);
        for _ in 0..n {
            let z1 = rng.normal();
            let z2 = rng.normal();
            // Cov = [[1, 0.5], [0.5, 1.25]] from x2 = 0.5 z1 + z2.
            cloud.push([z1, 0.5 * z1 + z2]);
        }
        let s = MomentSummary::from_cloud(&cloud, 8);
        assert!(s.mean[0].abs() < 3.0 * s.mean_se[0] + 1e-3);
        assert_abs_diff_eq!(s.cov[0][0], 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(s.cov[0][1], 0.5, epsilon = 0.03);
        assert_abs_diff_eq!(s.cov[1][1], 1.25, epsilon = 0.04);
        assert!(s.cov_se[0][0] > 0.0);
    }

    #[test]
    fn ks_accepts_true_law_rejects_shifted() {
        let mut rng = RngStream::root(12);
        let n = 10_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let phi = |x: f64| 0.5 * statrs::function::erf::erfc(-x / 2f64.sqrt());
        let d = ks_one_sample(&samples, phi);
        assert!(ks_pvalue(d, n as f64) > 0.01, "d={d}");
        let shifted: Vec<f64> = samples.iter().map(|x| x + 0.1).collect();
        let d2 = ks_one_sample(&shifted, phi);
        assert!(ks_pvalue(d2, n as f64) < 1e-6, "d2={d2}");
        // Two-sample: same law accepted.
        let other: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let d3 = ks_two_sample(&samples, &other);
        let n_eff = (n * n) as f64 / (2 * n) as f64;
        assert!(ks_pvalue(d3, n_eff) > 0.01, "d3={d3}");
    }

    #[test]
    fn gauss_hermite_integrates_moments_exactly() {
        let (nodes, weights) = gauss_hermite(8).unwrap();
        let moment = |p: u32| -> f64 {
            nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(p as i32))
                .sum()
        };
        // Gaussian moments: 0, 1, 0, 3, 0, 15, 0, 105 for powers 1..8.
        for (p, expect) in [(1, 0.0), (2, 1.0), (4, 3.0), (6, 15.0), (8, 105.0)] {
            assert_abs_diff_eq!(moment(p), expect, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
