//! Command-line driver: field simulation, corrector estimation, effective
//! coefficients, the limit diffusion, and the comparison experiments.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quasitracer::cell::{corrector_chi, CorrectorEstimate};
use quasitracer::config::AppConfig;
use quasitracer::effective::default_degree;
use quasitracer::error::{Error, Result};
use quasitracer::field::{sample_invariant, PhasePoint, Vec2};
use quasitracer::galerkin::galerkin_solve_chi;
use quasitracer::harness::{
    convergence_eps_ensemble, convergence_limit_ensemble, effective_model_for, run_averaging_check,
    run_convergence, run_passive_scalar, write_averaging_outputs, write_convergence_outputs,
    write_effective_csv, write_scalar_outputs,
};
use quasitracer::rng::RngStream;

/// Scaling-limit toolkit for passive tracers advected by locally
/// stationary quasi-periodic random flows.
#[derive(Parser)]
#[command(name = "quasitracer", version, about)]
struct Cli {
    /// TOML configuration with [modes], [experiment], [solver] sections;
    /// defaults apply for anything omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    /// Worker threads; 0 keeps the rayon default (all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ensembles of scaled characteristics, one CSV per epsilon
    /// (ensemble_eps_*.csv; columns: path_id, t, x1, x2).
    Simulate,
    /// Monte-Carlo corrector at a stationary amplitude draw against the
    /// spectral solution (corrector.json).
    Corrector {
        /// Corrector direction (0 or 1).
        #[arg(long, default_value_t = 1)]
        q: usize,
    },
    /// Effective drift and diffusivity table (effective_coeffs.csv).
    Coeffs,
    /// Limit-diffusion ensemble (limit.csv; columns: path_id, t, x1, x2).
    Limit,
    /// Endpoint-law convergence study of the epsilon ensembles against the
    /// limit (convergence_report.json, convergence_metrics.csv,
    /// covariance_curves.csv).
    Converge,
    /// Averaging of the configured fast observable along trajectories
    /// (averaging_report.json, averaging_metrics.csv).
    Average,
    /// Passive-scalar endpoint law against the backward equation
    /// (scalar_report.json, scalar_probes.csv, scalar_aggregate.csv).
    Scalar,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    // The resolved configuration is itself an output: together with the
    // seed it reproduces every file this run writes.
    std::fs::write(cli.out.join("config_resolved.toml"), cfg.to_toml_string()?)?;

    match cli.command {
        Command::Simulate => simulate(&cfg, &cli.out),
        Command::Corrector { q } => corrector(&cfg, &cli.out, q),
        Command::Coeffs => coeffs(&cfg, &cli.out),
        Command::Limit => limit(&cfg, &cli.out),
        Command::Converge => converge(&cfg, &cli.out),
        Command::Average => average(&cfg, &cli.out),
        Command::Scalar => scalar(&cfg, &cli.out),
    }
}

fn simulate(cfg: &AppConfig, out: &Path) -> Result<()> {
    for i in 0..cfg.experiment.eps_list.len() {
        let ens = convergence_eps_ensemble(cfg, i)?;
        let path = out.join(format!("ensemble_eps_{}.csv", cfg.experiment.eps_list[i]));
        ens.write_csv(File::create(&path)?)?;
        println!(
            "wrote {} ({} paths x {} times)",
            path.display(),
            ens.n_paths(),
            ens.n_times()
        );
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct CorrectorReport {
    q: usize,
    y: Vec2,
    amplitudes: PhasePoint,
    monte_carlo: CorrectorEstimate,
    spectral_value: f64,
    difference: f64,
    galerkin_degree: u8,
}

fn corrector(cfg: &AppConfig, out: &Path, q: usize) -> Result<()> {
    let y = cfg.experiment.x0;
    let root = RngStream::root(cfg.experiment.seed);
    let mut draw = root.child(0);
    let a0 = sample_invariant(&cfg.modes, y, &mut draw);
    let mc = corrector_chi(
        q,
        &a0,
        y,
        cfg.solver.corrector_tol,
        cfg.solver.n_probes,
        &cfg.modes,
        &root.child(1),
    )?;
    let degree = if cfg.solver.galerkin_degree > 0 {
        cfg.solver.galerkin_degree as u8
    } else {
        default_degree(cfg.modes.n())
    };
    let spectral = galerkin_solve_chi(&cfg.modes, y, q, degree)?;
    let spectral_value = spectral.eval(&a0);
    let report = CorrectorReport {
        q,
        y,
        amplitudes: a0,
        difference: mc.value - spectral_value,
        spectral_value,
        galerkin_degree: degree,
        monte_carlo: mc,
    };
    let doc = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::numerical(format!("report serialization: {e}")))?;
    std::fs::write(out.join("corrector.json"), doc + "\n")?;
    println!(
        "chi_{} at y=({}, {}): monte-carlo {:.6} +- {:.6}, spectral {:.6} (degree {})",
        report.q + 1,
        y[0],
        y[1],
        report.monte_carlo.value,
        report.monte_carlo.std_err,
        report.spectral_value,
        degree,
    );
    Ok(())
}

fn coeffs(cfg: &AppConfig, out: &Path) -> Result<()> {
    let model = effective_model_for(cfg)?;
    let path = out.join("effective_coeffs.csv");
    write_effective_csv(&model, &path)?;
    let (b, a) = model.interpolate(cfg.experiment.x0);
    println!(
        "wrote {} ({} x {} grid)",
        path.display(),
        model.y1.len(),
        model.y2.len()
    );
    print_coeffs_at_start(b, a);
    Ok(())
}

fn limit(cfg: &AppConfig, out: &Path) -> Result<()> {
    let (model, ens) = convergence_limit_ensemble(cfg)?;
    let path = out.join("limit.csv");
    ens.write_csv(File::create(&path)?)?;
    let (b, a) = model.interpolate(cfg.experiment.x0);
    println!(
        "wrote {} ({} paths x {} times)",
        path.display(),
        ens.n_paths(),
        ens.n_times()
    );
    print_coeffs_at_start(b, a);
    Ok(())
}

fn print_coeffs_at_start(b: [f64; 2], a: [[f64; 2]; 2]) {
    println!(
        "at the start point: B = ({:.5}, {:.5}), A = [[{:.5}, {:.5}], [{:.5}, {:.5}]]",
        b[0], b[1], a[0][0], a[0][1], a[1][0], a[1][1]
    );
}

fn converge(cfg: &AppConfig, out: &Path) -> Result<()> {
    let report = run_convergence(cfg)?;
    write_convergence_outputs(&report, out)?;
    for e in &report.per_eps {
        println!(
            "eps={:<6} sliced W1 to limit = {:.5} +- {:.5}",
            e.eps, e.sliced_w1, e.sliced_w1_se
        );
    }
    println!(
        "distance decreasing within 1 SE: {}",
        report.w1_decreasing_within_1se
    );
    Ok(())
}

fn average(cfg: &AppConfig, out: &Path) -> Result<()> {
    let report = run_averaging_check(cfg)?;
    write_averaging_outputs(&report, out)?;
    for e in &report.per_eps {
        println!(
            "eps={:<6} sup |integral gap|: median {:.6}, q90 {:.6}",
            e.eps, e.sup_median, e.sup_q90
        );
    }
    println!("median decay ratio: {:.3}", report.median_decay_ratio);
    Ok(())
}

fn scalar(cfg: &AppConfig, out: &Path) -> Result<()> {
    let report = run_passive_scalar(cfg)?;
    write_scalar_outputs(&report, out)?;
    for row in &report.aggregate {
        println!(
            "eps={:<6} mean W1 = {:.6} +- {:.6}, max |mean - pde| = {:.6}",
            row.eps, row.mean_w1, row.mean_w1_se, row.max_abs_mean_error
        );
    }
    println!(
        "W1 decreasing within 1 SE: {}",
        report.w1_decreasing_within_1se
    );
    Ok(())
}
