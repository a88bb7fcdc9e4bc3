//! Experiment drivers.
//!
//! Three studies on top of the simulators: convergence in law of the scaled
//! characteristics to the limit diffusion, averaging of fast-amplitude
//! functionals along trajectories, and the passive-scalar endpoint law
//! against the backward equation.  Every random stream derives from the
//! configured master seed through fixed task labels, so each report and
//! every emitted file is a function of the configuration alone.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{
    integrate_eps_path_observed, simulate_ensemble, EpsTrajectoryConfig,
};
use crate::config::{AppConfig, AveragingProbe};
use crate::effective::{estimate_effective, tabulate_effective, EffectiveConfig, EffectiveModel};
use crate::ensemble::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::field::{w_functional, ModeSet, PhasePoint, Vec2};
use crate::limit::{
    simulate_limit, solve_backward_pde, BackwardPdeConfig, LimitSdeConfig, PdeSolution,
};
use crate::metrics::{gauss_hermite, mean_cov, sliced_w1_with_se, w1, MomentSummary};
use crate::rng::{derive_seed, RngStream};

/// Fixed projection count of the sliced distance; part of the metric
/// definition rather than a tuning knob.
pub const N_PROJECTIONS: usize = 32;

/// Intermediate times at which ensemble covariances are tabulated.
pub const N_COV_TIMES: usize = 8;

/// Contiguous batches behind every standard error.
const N_BATCHES: usize = 16;

// Task labels for seed derivation.  Per-index streams nest a second
// derivation below the task seed, so the namespaces cannot collide.
const LABEL_COEFFS: u64 = 1;
const LABEL_LIMIT: u64 = 2;
const LABEL_EPS: u64 = 3;
const LABEL_AVERAGING: u64 = 4;
const LABEL_SCALAR_EPS: u64 = 5;
const LABEL_SCALAR_LIMIT: u64 = 6;

/// Identifies the exact inputs behind a report.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub package: String,
    pub version: String,
    /// SHA-256 of the full configuration, canonical JSON encoding.
    pub config_sha256: String,
    /// SHA-256 of the `[modes]` section alone.
    pub modes_sha256: String,
    pub master_seed: u64,
    pub seed_scheme: String,
}

impl Provenance {
    pub fn new(cfg: &AppConfig) -> Self {
        Provenance {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.fingerprint(),
            modes_sha256: cfg.modes_fingerprint(),
            master_seed: cfg.experiment.seed,
            seed_scheme: "task streams split from the master seed by fixed labels; \
                          path p uses child p of its task stream"
                .to_string(),
        }
    }
}

/// Effective coefficients for the configured field: a single estimate at
/// the start point when the profiles are constant, otherwise a square grid
/// of `coeff_points` nodes per axis centered at the start point (constant
/// extrapolation outside).
pub fn effective_model_for(cfg: &AppConfig) -> Result<EffectiveModel> {
    let ecfg = EffectiveConfig {
        n_probes: cfg.solver.n_probes,
        tol: cfg.solver.corrector_tol,
        fd_step: cfg.solver.fd_step,
    };
    let rng = RngStream::root(derive_seed(cfg.experiment.seed, LABEL_COEFFS));
    let x0 = cfg.experiment.x0;
    if cfg.modes.is_constant() || cfg.solver.coeff_points == 1 {
        let est = estimate_effective(&cfg.modes, x0, &ecfg, &rng)?;
        return Ok(EffectiveModel {
            y1: vec![x0[0]],
            y2: vec![x0[1]],
            points: vec![est],
        });
    }
    let m = cfg.solver.coeff_points;
    let hw = cfg.solver.coeff_halfwidth;
    let axis = |c: f64| -> Vec<f64> {
        (0..m)
            .map(|i| c - hw + 2.0 * hw * i as f64 / (m as f64 - 1.0))
            .collect()
    };
    tabulate_effective(&cfg.modes, &axis(x0[0]), &axis(x0[1]), &ecfg, &rng)
}

fn eps_trajectory_config(cfg: &AppConfig, eps: f64, x0: Vec2) -> EpsTrajectoryConfig {
    let mut tcfg = EpsTrajectoryConfig::new(eps, x0, cfg.experiment.t_horizon);
    tcfg.substep_c = cfg.solver.substep_c;
    tcfg.points_per_unit = cfg.solver.points_per_unit;
    tcfg.bank_nodes = cfg.solver.bank_nodes;
    tcfg
}

fn limit_config(cfg: &AppConfig, x0: Vec2) -> LimitSdeConfig {
    LimitSdeConfig {
        x0,
        t0: 0.0,
        t1: cfg.experiment.t_horizon,
        dt: cfg.solver.sde_dt,
        points_per_unit: cfg.solver.points_per_unit,
    }
}

// ---------------------------------------------------------------------------
// Convergence of the scaled characteristics to the limit diffusion.

/// Ensemble covariance at one output time.
#[derive(Clone, Debug, Serialize)]
pub struct CovRow {
    pub t: f64,
    pub c11: f64,
    pub c12: f64,
    pub c22: f64,
}

/// Endpoint statistics of one epsilon ensemble against the limit law.
#[derive(Clone, Debug, Serialize)]
pub struct EpsSummary {
    pub eps: f64,
    pub endpoint: MomentSummary,
    pub sliced_w1: f64,
    pub sliced_w1_se: f64,
    pub covariance: Vec<CovRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub provenance: Provenance,
    pub t_horizon: f64,
    pub n_paths: usize,
    pub b_at_start: [f64; 2],
    pub a_at_start: [[f64; 2]; 2],
    pub limit_endpoint: MomentSummary,
    pub limit_covariance: Vec<CovRow>,
    pub per_eps: Vec<EpsSummary>,
    /// Sliced W1 to the limit law is nonincreasing along the epsilon list,
    /// with one combined standard error of slack per step.
    pub w1_decreasing_within_1se: bool,
}

/// `N_COV_TIMES` output indices spread over the grid, final time included,
/// deduplicated on short grids.
fn covariance_indices(n_times: usize) -> Vec<usize> {
    let last = n_times - 1;
    let mut idx: Vec<usize> = (1..=N_COV_TIMES).map(|j| j * last / N_COV_TIMES).collect();
    idx.dedup();
    idx.retain(|&i| i > 0);
    idx
}

fn covariance_curve(ens: &TrajectoryEnsemble, idx: &[usize]) -> Vec<CovRow> {
    idx.iter()
        .map(|&m| {
            let (_, cov) = mean_cov(&ens.positions_at(m));
            CovRow {
                t: ens.times[m],
                c11: cov[0][0],
                c12: cov[0][1],
                c22: cov[1][1],
            }
        })
        .collect()
}

/// The epsilon ensemble the convergence study uses at list position `i`;
/// the `simulate` entry point emits exactly these.
pub fn convergence_eps_ensemble(cfg: &AppConfig, i: usize) -> Result<TrajectoryEnsemble> {
    let eps = *cfg
        .experiment
        .eps_list
        .get(i)
        .ok_or_else(|| Error::invalid("epsilon index out of range"))?;
    let tcfg = eps_trajectory_config(cfg, eps, cfg.experiment.x0);
    let seed = derive_seed(derive_seed(cfg.experiment.seed, LABEL_EPS), i as u64);
    simulate_ensemble(&tcfg, &cfg.modes, cfg.experiment.n_paths, seed)
}

/// The limit-diffusion ensemble of the convergence study, together with
/// the effective model that drives it.
pub fn convergence_limit_ensemble(
    cfg: &AppConfig,
) -> Result<(EffectiveModel, TrajectoryEnsemble)> {
    let model = effective_model_for(cfg)?;
    let ens = simulate_limit(
        &limit_config(cfg, cfg.experiment.x0),
        &model,
        cfg.experiment.n_paths,
        &RngStream::root(derive_seed(cfg.experiment.seed, LABEL_LIMIT)),
    )?;
    Ok((model, ens))
}

pub fn run_convergence(cfg: &AppConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let exp = &cfg.experiment;
    let (model, limit) = convergence_limit_ensemble(cfg)?;
    let (b0, a0) = model.interpolate(exp.x0);
    let limit_end = limit.endpoints();
    let idx = covariance_indices(limit.n_times());

    let mut per_eps = Vec::with_capacity(exp.eps_list.len());
    for (i, &eps) in exp.eps_list.iter().enumerate() {
        let ens = convergence_eps_ensemble(cfg, i)?;
        debug_assert_eq!(ens.n_times(), limit.n_times());
        let end = ens.endpoints();
        let (sw, sw_se) = sliced_w1_with_se(&end, &limit_end, N_PROJECTIONS, N_BATCHES);
        per_eps.push(EpsSummary {
            eps,
            endpoint: MomentSummary::from_cloud(&end, N_BATCHES),
            sliced_w1: sw,
            sliced_w1_se: sw_se,
            covariance: covariance_curve(&ens, &idx),
        });
    }

    let w1_decreasing_within_1se = per_eps.windows(2).all(|w| {
        let se = (w[0].sliced_w1_se.powi(2) + w[1].sliced_w1_se.powi(2)).sqrt();
        w[1].sliced_w1 <= w[0].sliced_w1 + se
    });

    Ok(ConvergenceReport {
        provenance: Provenance::new(cfg),
        t_horizon: exp.t_horizon,
        n_paths: exp.n_paths,
        b_at_start: b0,
        a_at_start: a0,
        limit_endpoint: MomentSummary::from_cloud(&limit_end, N_BATCHES),
        limit_covariance: covariance_curve(&limit, &idx),
        per_eps,
        w1_decreasing_within_1se,
    })
}

pub fn write_convergence_outputs(report: &ConvergenceReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("convergence_report.json"), report)?;

    let mut w = csv::Writer::from_path(dir.join("convergence_metrics.csv"))?;
    w.write_record([
        "label",
        "eps",
        "n_paths",
        "mean1",
        "mean1_se",
        "mean2",
        "mean2_se",
        "cov11",
        "cov12",
        "cov22",
        "sliced_w1",
        "sliced_w1_se",
    ])?;
    let moment_fields = |s: &MomentSummary| {
        (
            s.n,
            s.mean[0],
            s.mean_se[0],
            s.mean[1],
            s.mean_se[1],
            s.cov[0][0],
            s.cov[0][1],
            s.cov[1][1],
        )
    };
    for e in &report.per_eps {
        let (n, m1, m1se, m2, m2se, c11, c12, c22) = moment_fields(&e.endpoint);
        w.serialize((
            format!("eps={}", e.eps),
            Some(e.eps),
            n,
            m1,
            m1se,
            m2,
            m2se,
            c11,
            c12,
            c22,
            Some(e.sliced_w1),
            Some(e.sliced_w1_se),
        ))?;
    }
    let (n, m1, m1se, m2, m2se, c11, c12, c22) = moment_fields(&report.limit_endpoint);
    w.serialize((
        "limit",
        None::<f64>,
        n,
        m1,
        m1se,
        m2,
        m2se,
        c11,
        c12,
        c22,
        None::<f64>,
        None::<f64>,
    ))?;
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("covariance_curves.csv"))?;
    w.write_record(["label", "t", "c11", "c12", "c22"])?;
    for r in &report.limit_covariance {
        w.serialize(("limit", r.t, r.c11, r.c12, r.c22))?;
    }
    for e in &report.per_eps {
        let label = format!("eps={}", e.eps);
        for r in &e.covariance {
            w.serialize((label.as_str(), r.t, r.c11, r.c12, r.c22))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Tabulated effective coefficients as one flat CSV, rows in grid order
/// (outer loop over y2).
pub fn write_effective_csv(model: &EffectiveModel, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "y1",
        "y2",
        "b1",
        "b2",
        "b1_se",
        "b2_se",
        "a11",
        "a12",
        "a22",
        "a11_se",
        "a12_se",
        "a22_se",
        "psd_projection",
        "warning",
    ])?;
    for iy in 0..model.y2.len() {
        for ix in 0..model.y1.len() {
            let p = model.at(ix, iy);
            w.serialize((
                p.y[0],
                p.y[1],
                p.b[0],
                p.b[1],
                p.b_se[0],
                p.b_se[1],
                p.a[0][0],
                p.a[0][1],
                p.a[1][1],
                p.a_se[0][0],
                p.a_se[0][1],
                p.a_se[1][1],
                p.psd_projection,
                p.warning.as_deref().unwrap_or(""),
            ))?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Averaging of fast-amplitude functionals along trajectories.

/// Pointwise evaluation of the averaging observable.
pub fn probe_eval(probe: &AveragingProbe, p: &PhasePoint, modes: &ModeSet) -> f64 {
    match *probe {
        AveragingProbe::Constant { value } => value,
        AveragingProbe::SquareAmplitude { mode } => p.a[mode] * p.a[mode],
        AveragingProbe::DriftComponent { q } => w_functional(p, modes)[q],
    }
}

/// Invariant-measure mean of the observable at slow position `y`.  The
/// square amplitude integrates by Gauss-Hermite quadrature in its single
/// active coordinate; the drift components are odd in centered Gaussian
/// coordinates, so their mean vanishes identically.
pub fn probe_mean(
    probe: &AveragingProbe,
    y: Vec2,
    modes: &ModeSet,
    quad: &(Vec<f64>, Vec<f64>),
) -> f64 {
    match *probe {
        AveragingProbe::Constant { value } => value,
        AveragingProbe::SquareAmplitude { mode } => {
            let s = modes.sigma(mode, y);
            quad.0
                .iter()
                .zip(&quad.1)
                .map(|(&z, &w)| w * (s * z) * (s * z))
                .sum()
        }
        AveragingProbe::DriftComponent { .. } => 0.0,
    }
}

/// Distribution summary of the per-path running suprema at one epsilon.
#[derive(Clone, Debug, Serialize)]
pub struct AveragingEps {
    pub eps: f64,
    pub n_paths: usize,
    pub sup_mean: f64,
    pub sup_se: f64,
    pub sup_median: f64,
    pub sup_q90: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AveragingReport {
    pub provenance: Provenance,
    pub probe: AveragingProbe,
    pub t_horizon: f64,
    pub per_eps: Vec<AveragingEps>,
    /// Median supremum at the largest epsilon over the median at the
    /// smallest; large values witness the averaging effect.  NaN when both
    /// medians vanish exactly.
    pub median_decay_ratio: f64,
}

/// For each epsilon, integrates paths while accumulating
/// `∫ (F(a(s; x(s))) - F̄(x(s))) ds` by the rectangle rule and records the
/// running supremum of its absolute value per path.
pub fn run_averaging_check(cfg: &AppConfig) -> Result<AveragingReport> {
    cfg.validate()?;
    let exp = &cfg.experiment;
    let quad = gauss_hermite(8)?;
    let task = derive_seed(exp.seed, LABEL_AVERAGING);

    let mut per_eps = Vec::with_capacity(exp.eps_list.len());
    for (i, &eps) in exp.eps_list.iter().enumerate() {
        let tcfg = eps_trajectory_config(cfg, eps, exp.x0);
        let root = RngStream::root(derive_seed(task, i as u64));
        let sups: Result<Vec<f64>> = (0..exp.n_paths)
            .into_par_iter()
            .map(|pid| {
                let mut rng = root.child(pid as u64);
                let mut acc = 0.0;
                let mut sup = 0.0f64;
                integrate_eps_path_observed(&tcfg, &cfg.modes, &mut rng, &mut |_t, x, p, h| {
                    acc += h
                        * (probe_eval(&exp.probe, p, &cfg.modes)
                            - probe_mean(&exp.probe, x, &cfg.modes, &quad));
                    sup = sup.max(acc.abs());
                })?;
                Ok(sup)
            })
            .collect();
        let mut sups = sups?;
        let (sup_mean, sup_se) = mean_se(&sups);
        sups.sort_by(f64::total_cmp);
        per_eps.push(AveragingEps {
            eps,
            n_paths: sups.len(),
            sup_mean,
            sup_se,
            sup_median: quantile_sorted(&sups, 0.5),
            sup_q90: quantile_sorted(&sups, 0.9),
        });
    }

    let first = per_eps.first().map(|e| e.sup_median).unwrap_or(0.0);
    let last = per_eps.last().map(|e| e.sup_median).unwrap_or(0.0);
    let median_decay_ratio = if last > 0.0 {
        first / last
    } else if first == 0.0 {
        f64::NAN
    } else {
        f64::INFINITY
    };

    Ok(AveragingReport {
        provenance: Provenance::new(cfg),
        probe: exp.probe.clone(),
        t_horizon: exp.t_horizon,
        per_eps,
        median_decay_ratio,
    })
}

pub fn write_averaging_outputs(report: &AveragingReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("averaging_report.json"), report)?;
    let mut w = csv::Writer::from_path(dir.join("averaging_metrics.csv"))?;
    w.write_record(["eps", "n_paths", "sup_mean", "sup_se", "sup_median", "sup_q90"])?;
    for e in &report.per_eps {
        w.serialize((e.eps, e.n_paths, e.sup_mean, e.sup_se, e.sup_median, e.sup_q90))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Passive scalar: endpoint law of u0 along the characteristics against the
// limit diffusion and the backward equation.

#[derive(Clone, Debug, Serialize)]
pub struct ScalarEpsRow {
    pub eps: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub w1_vs_limit: f64,
    pub w1_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalarProbeReport {
    pub x: Vec2,
    pub pde_value: f64,
    pub limit_mean: f64,
    pub limit_mean_se: f64,
    pub per_eps: Vec<ScalarEpsRow>,
}

/// Per-epsilon aggregation over the probe grid.
#[derive(Clone, Debug, Serialize)]
pub struct ScalarAggregateRow {
    pub eps: f64,
    /// Mean over probes of the per-probe W1 distance to the limit law.
    pub mean_w1: f64,
    pub mean_w1_se: f64,
    /// Largest |E u_eps - backward-equation value| over the probes.
    pub max_abs_mean_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalarReport {
    pub provenance: Provenance,
    pub t_horizon: f64,
    pub n_paths: usize,
    /// Sup norm of the initial data, the natural scale for mean errors.
    pub data_sup: f64,
    pub probes: Vec<ScalarProbeReport>,
    pub aggregate: Vec<ScalarAggregateRow>,
    pub w1_decreasing_within_1se: bool,
}

/// 3x3 probe grid centered at `x0`.
pub fn probe_grid(x0: Vec2, halfwidth: f64) -> Vec<Vec2> {
    let offs = [-halfwidth, 0.0, halfwidth];
    let mut out = Vec::with_capacity(9);
    for &dy in &offs {
        for &dx in &offs {
            out.push([x0[0] + dx, x0[1] + dy]);
        }
    }
    out
}

/// Backward solve on a box containing the probes with room for the limit
/// diffusion to spread: six standard deviations of the largest tabulated
/// diffusivity plus the largest drift displacement.
fn scalar_pde(cfg: &AppConfig, model: &EffectiveModel, probes: &[Vec2]) -> Result<PdeSolution> {
    let exp = &cfg.experiment;
    let hw = if cfg.solver.pde_halfwidth > 0.0 {
        cfg.solver.pde_halfwidth
    } else {
        let spread = model
            .points
            .iter()
            .map(|p| p.a[0][0].max(p.a[1][1]))
            .fold(0.0, f64::max);
        let drift = model
            .points
            .iter()
            .map(|p| p.b[0].abs().max(p.b[1].abs()))
            .fold(0.0, f64::max);
        exp.probe_halfwidth + 6.0 * (spread * exp.t_horizon).sqrt() + drift * exp.t_horizon
    };
    let center = exp.x0;
    let reach = probes
        .iter()
        .map(|p| (p[0] - center[0]).abs().max((p[1] - center[1]).abs()))
        .fold(0.0, f64::max);
    let half = hw.max(reach + 1.0);
    let mut pcfg = BackwardPdeConfig::new(
        [center[0] - half, center[1] - half],
        [center[0] + half, center[1] + half],
        cfg.solver.pde_points,
        cfg.solver.pde_points,
        0.0,
        exp.t_horizon,
    );
    pcfg.cfl = cfg.solver.pde_cfl;
    let data = exp.scalar_data.clone();
    solve_backward_pde(&pcfg, model, &move |x| data.eval(x))
}

pub fn run_passive_scalar(cfg: &AppConfig) -> Result<ScalarReport> {
    cfg.validate()?;
    let exp = &cfg.experiment;
    let model = effective_model_for(cfg)?;
    let probes = probe_grid(exp.x0, exp.probe_halfwidth);
    let pde = scalar_pde(cfg, &model, &probes)?;

    let eps_task = derive_seed(exp.seed, LABEL_SCALAR_EPS);
    let limit_task = derive_seed(exp.seed, LABEL_SCALAR_LIMIT);

    let mut probe_reports = Vec::with_capacity(probes.len());
    for (p_idx, &x) in probes.iter().enumerate() {
        let lim = simulate_limit(
            &limit_config(cfg, x),
            &model,
            exp.n_paths,
            &RngStream::root(derive_seed(limit_task, p_idx as u64)),
        )?;
        let lim_vals: Vec<f64> = lim
            .endpoints()
            .iter()
            .map(|&e| exp.scalar_data.eval(e))
            .collect();
        let (limit_mean, limit_mean_se) = mean_se(&lim_vals);

        let mut per_eps = Vec::with_capacity(exp.eps_list.len());
        for (i, &eps) in exp.eps_list.iter().enumerate() {
            let tcfg = eps_trajectory_config(cfg, eps, x);
            let seed = derive_seed(eps_task, (p_idx * 64 + i) as u64);
            let ens = simulate_ensemble(&tcfg, &cfg.modes, exp.n_paths, seed)?;
            let vals: Vec<f64> = ens
                .endpoints()
                .iter()
                .map(|&e| exp.scalar_data.eval(e))
                .collect();
            let (mean, mean_se_v) = mean_se(&vals);
            let (d, d_se) = w1_with_se(&vals, &lim_vals, N_BATCHES);
            per_eps.push(ScalarEpsRow {
                eps,
                mean,
                mean_se: mean_se_v,
                w1_vs_limit: d,
                w1_se: d_se,
            });
        }
        probe_reports.push(ScalarProbeReport {
            x,
            pde_value: pde.u.eval(x),
            limit_mean,
            limit_mean_se,
            per_eps,
        });
    }

    let n_probes = probe_reports.len() as f64;
    let mut aggregate = Vec::with_capacity(exp.eps_list.len());
    for (i, &eps) in exp.eps_list.iter().enumerate() {
        let mut sum_w1 = 0.0;
        let mut var_w1 = 0.0;
        let mut max_err = 0.0f64;
        for pr in &probe_reports {
            let row = &pr.per_eps[i];
            sum_w1 += row.w1_vs_limit;
            var_w1 += row.w1_se * row.w1_se;
            max_err = max_err.max((row.mean - pr.pde_value).abs());
        }
        aggregate.push(ScalarAggregateRow {
            eps,
            mean_w1: sum_w1 / n_probes,
            mean_w1_se: var_w1.sqrt() / n_probes,
            max_abs_mean_error: max_err,
        });
    }

    let w1_decreasing_within_1se = aggregate.windows(2).all(|w| {
        let se = (w[0].mean_w1_se.powi(2) + w[1].mean_w1_se.powi(2)).sqrt();
        w[1].mean_w1 <= w[0].mean_w1 + se
    });

    Ok(ScalarReport {
        provenance: Provenance::new(cfg),
        t_horizon: exp.t_horizon,
        n_paths: exp.n_paths,
        data_sup: exp.scalar_data.sup_abs(),
        probes: probe_reports,
        aggregate,
        w1_decreasing_within_1se,
    })
}

pub fn write_scalar_outputs(report: &ScalarReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("scalar_report.json"), report)?;

    let mut w = csv::Writer::from_path(dir.join("scalar_probes.csv"))?;
    w.write_record([
        "probe_x1",
        "probe_x2",
        "eps",
        "mean",
        "mean_se",
        "w1_vs_limit",
        "w1_se",
        "pde_value",
        "limit_mean",
        "limit_mean_se",
    ])?;
    for pr in &report.probes {
        for row in &pr.per_eps {
            w.serialize((
                pr.x[0],
                pr.x[1],
                row.eps,
                row.mean,
                row.mean_se,
                row.w1_vs_limit,
                row.w1_se,
                pr.pde_value,
                pr.limit_mean,
                pr.limit_mean_se,
            ))?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("scalar_aggregate.csv"))?;
    w.write_record(["eps", "mean_w1", "mean_w1_se", "max_abs_mean_error"])?;
    for row in &report.aggregate {
        w.serialize((row.eps, row.mean_w1, row.mean_w1_se, row.max_abs_mean_error))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared small statistics and serialization helpers.

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut doc = serde_json::to_string_pretty(value)
        .map_err(|e| Error::numerical(format!("report serialization: {e}")))?;
    doc.push('\n');
    fs::write(path, doc)?;
    Ok(())
}

fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// 1-d W1 with a batch standard error; the point estimate uses the full
/// samples, the SE the spread over equal contiguous batches.
fn w1_with_se(a: &[f64], b: &[f64], n_batches: usize) -> (f64, f64) {
    let point = w1(a, b);
    let nb = n_batches.min(a.len()).min(b.len()).max(1);
    if nb < 2 {
        return (point, f64::NAN);
    }
    let mut vals = Vec::with_capacity(nb);
    for j in 0..nb {
        let slab = |c: &[f64]| c[c.len() * j / nb..c.len() * (j + 1) / nb].to_vec();
        vals.push(w1(&slab(a), &slab(b)));
    }
    let mean = vals.iter().sum::<f64>() / nb as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nb - 1) as f64;
    (point, (var / nb as f64).sqrt())
}

/// Linear-interpolated quantile of an ascending-sorted sample.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}
