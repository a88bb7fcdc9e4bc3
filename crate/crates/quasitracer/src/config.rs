//! Experiment configuration.
//!
//! One TOML document with three sections: `[modes]` describes the velocity
//! field, `[experiment]` the scaling study (epsilon list, horizon, ensemble
//! size, probe payloads), `[solver]` the numerical knobs shared by the
//! estimators and integrators.  Every section has complete defaults, so an
//! empty document is a valid configuration.  A parsed configuration is
//! always validated; downstream code may assume the invariants checked
//! here.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{ModeSet, Vec2};

/// Initial scalar data for the passive-tracer experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarData {
    Constant { value: f64 },
    /// `exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump { center: Vec2, width: f64 },
    /// `0.5 (1 + tanh(x_1 / width))`, a smoothed interface.
    TanhFront { width: f64 },
}

impl ScalarData {
    pub fn eval(&self, x: Vec2) -> f64 {
        match *self {
            ScalarData::Constant { value } => value,
            ScalarData::GaussianBump { center, width } => {
                let dx = [x[0] - center[0], x[1] - center[1]];
                (-(dx[0] * dx[0] + dx[1] * dx[1]) / (2.0 * width * width)).exp()
            }
            ScalarData::TanhFront { width } => 0.5 * (1.0 + (x[0] / width).tanh()),
        }
    }

    /// Largest absolute value the data can attain, used to scale error
    /// tolerances.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            ScalarData::Constant { value } => value.abs(),
            ScalarData::GaussianBump { .. } => 1.0,
            ScalarData::TanhFront { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let width = match *self {
            ScalarData::Constant { .. } => return Ok(()),
            ScalarData::GaussianBump { width, .. } => width,
            ScalarData::TanhFront { width } => width,
        };
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::Config(format!(
                "scalar data width must be positive and finite, got {width}"
            )));
        }
        Ok(())
    }
}

/// Observable of the fast amplitude state whose time average the averaging
/// experiment compares against its invariant-measure mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AveragingProbe {
    Constant { value: f64 },
    /// `a_i^2` for one mode; its invariant mean is `sigma_i(y)^2`.
    SquareAmplitude { mode: usize },
    /// One component of the fluctuation functional `w(a)`; its invariant
    /// mean vanishes identically.
    DriftComponent { q: usize },
}

impl AveragingProbe {
    fn validate(&self, n_modes: usize) -> Result<()> {
        match *self {
            AveragingProbe::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::Config("probe constant must be finite".into()));
                }
            }
            AveragingProbe::SquareAmplitude { mode } => {
                if mode >= n_modes {
                    return Err(Error::Config(format!(
                        "probe mode index {mode} out of range for {n_modes} modes"
                    )));
                }
            }
            AveragingProbe::DriftComponent { q } => {
                if q >= 2 {
                    return Err(Error::Config(format!(
                        "probe drift component must be 0 or 1, got {q}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The scaling study: which epsilons to run, how long, how many paths, and
/// the payloads of the averaging and passive-scalar experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Scale separation parameters, strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Macroscopic time horizon.
    pub t_horizon: f64,
    /// Ensemble size per epsilon.
    pub n_paths: usize,
    /// Common starting point of every trajectory.
    pub x0: Vec2,
    /// Master seed; the command line can override it.
    pub seed: u64,
    /// Observable for the averaging experiment.
    pub probe: AveragingProbe,
    /// Initial data for the passive-scalar experiment.
    pub scalar_data: ScalarData,
    /// Half-width of the 3x3 probe grid around `x0` where the scalar is
    /// evaluated.
    pub probe_halfwidth: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            eps_list: vec![0.4, 0.3, 0.2, 0.15, 0.1],
            t_horizon: 2.0,
            n_paths: 10_000,
            x0: [0.0, 0.0],
            seed: 1,
            probe: AveragingProbe::SquareAmplitude { mode: 0 },
            scalar_data: ScalarData::GaussianBump {
                center: [0.0, 0.0],
                width: 1.0,
            },
            probe_halfwidth: 0.5,
        }
    }
}

/// Numerical knobs shared by the estimators and integrators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// Micro-step safety factor for the scaled characteristics.
    pub substep_c: f64,
    /// Rate-grid nodes in the amplitude bank.
    pub bank_nodes: usize,
    /// Output nodes per unit of macroscopic time.
    pub points_per_unit: usize,
    /// Euler-Maruyama step for the limit diffusion.
    pub sde_dt: f64,
    /// Monte-Carlo probes per effective-coefficient entry.
    pub n_probes: usize,
    /// Relative tail tolerance for corrector time quadratures.
    pub corrector_tol: f64,
    /// Slow-variable finite-difference step inside the drift estimator.
    pub fd_step: f64,
    /// Hermite degree per amplitude coordinate; 0 picks a default based on
    /// the mode count.
    pub galerkin_degree: usize,
    /// Half-width of the square grid on which effective coefficients are
    /// tabulated.  Ignored when all profiles are constant.
    pub coeff_halfwidth: f64,
    /// Nodes per axis of that grid.
    pub coeff_points: usize,
    /// Nodes per axis of the backward-equation grid.
    pub pde_points: usize,
    /// Time-step safety factor for the explicit backward solver.
    pub pde_cfl: f64,
    /// Half-width of the backward-equation box; 0 derives one from the
    /// coefficients and the horizon.
    pub pde_halfwidth: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            substep_c: 0.05,
            bank_nodes: 33,
            points_per_unit: 64,
            sde_dt: 5e-3,
            n_probes: 1000,
            corrector_tol: 1e-3,
            fd_step: 0.02,
            galerkin_degree: 0,
            coeff_halfwidth: 1.0,
            coeff_points: 5,
            pde_points: 161,
            pde_cfl: 0.45,
            pde_halfwidth: 0.0,
        }
    }
}

/// A complete, validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub modes: ModeSet,
    pub experiment: ExperimentSection,
    pub solver: SolverSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            modes: ModeSet::default_constant(),
            experiment: ExperimentSection::default(),
            solver: SolverSection::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(doc: &str) -> Result<Self> {
        let cfg: AppConfig = toml::from_str(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path)?;
        Self::from_toml_str(&doc)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.modes.validate()?;
        let e = &self.experiment;
        if e.eps_list.is_empty() {
            return Err(Error::Config("eps_list must not be empty".into()));
        }
        for &eps in &e.eps_list {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::Config(format!(
                    "every epsilon must lie in (0, 1], got {eps}"
                )));
            }
        }
        if e.eps_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("eps_list must be strictly decreasing".into()));
        }
        if !(e.t_horizon > 0.0) || !e.t_horizon.is_finite() {
            return Err(Error::Config("t_horizon must be positive".into()));
        }
        if e.n_paths < 2 {
            return Err(Error::Config("n_paths must be at least 2".into()));
        }
        if !e.x0.iter().all(|c| c.is_finite()) {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if !(e.probe_halfwidth > 0.0) || !e.probe_halfwidth.is_finite() {
            return Err(Error::Config("probe_halfwidth must be positive".into()));
        }
        e.probe.validate(self.modes.modes.len())?;
        e.scalar_data.validate()?;

        let s = &self.solver;
        if !(s.substep_c > 0.0 && s.substep_c <= 0.5) {
            return Err(Error::Config("substep_c must lie in (0, 0.5]".into()));
        }
        if s.bank_nodes < 4 {
            return Err(Error::Config("bank_nodes must be at least 4".into()));
        }
        if s.points_per_unit == 0 {
            return Err(Error::Config("points_per_unit must be positive".into()));
        }
        if !(s.sde_dt > 0.0 && s.sde_dt <= 1e-2) {
            return Err(Error::Config("sde_dt must lie in (0, 1e-2]".into()));
        }
        if s.n_probes < 2 {
            return Err(Error::Config("n_probes must be at least 2".into()));
        }
        if !(s.corrector_tol > 0.0 && s.corrector_tol <= 0.1) {
            return Err(Error::Config("corrector_tol must lie in (0, 0.1]".into()));
        }
        if !(s.fd_step > 0.0 && s.fd_step <= 0.2) {
            return Err(Error::Config("fd_step must lie in (0, 0.2]".into()));
        }
        if s.galerkin_degree > 12 {
            return Err(Error::Config(
                "galerkin_degree above 12 is not supported".into(),
            ));
        }
        if s.coeff_points == 0 {
            return Err(Error::Config("coeff_points must be positive".into()));
        }
        if s.coeff_points > 1 && !(s.coeff_halfwidth > 0.0) {
            return Err(Error::Config(
                "coeff_halfwidth must be positive for a multi-point grid".into(),
            ));
        }
        if s.pde_points < 3 {
            return Err(Error::Config("pde_points must be at least 3".into()));
        }
        if !(s.pde_cfl > 0.0 && s.pde_cfl <= 1.0) {
            return Err(Error::Config("pde_cfl must lie in (0, 1]".into()));
        }
        if s.pde_halfwidth < 0.0 || !s.pde_halfwidth.is_finite() {
            return Err(Error::Config("pde_halfwidth must be nonnegative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies the full
    /// configuration in provenance records.
    pub fn fingerprint(&self) -> String {
        sha256_json(self)
    }

    /// Fingerprint of the `[modes]` section alone.
    pub fn modes_fingerprint(&self) -> String {
        sha256_json(&self.modes)
    }
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    // serde_json writes struct fields in declaration order, so equal values
    // produce equal digests.
    let doc = serde_json::to_string(value).expect("config serialization cannot fail");
    let mut h = Sha256::new();
    h.update(doc.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Profile;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let doc = cfg.to_toml_string().unwrap();
        let back = AppConfig::from_toml_str(&doc).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_document_yields_defaults() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());
    }

    #[test]
    fn parses_full_document_with_varying_profiles() {
        let doc = r#"
            [experiment]
            eps_list = [0.4, 0.2]
            t_horizon = 1.5
            n_paths = 256
            x0 = [0.1, -0.2]
            seed = 7

            [experiment.probe]
            kind = "drift_component"
            q = 1

            [experiment.scalar_data]
            kind = "tanh_front"
            width = 0.7

            [solver]
            substep_c = 0.02
            pde_points = 101

            [modes]
            gamma0 = 0.5
            sigma_star = 0.5

            [[modes.modes]]
            k = [1.0, 0.0]
            alpha = { kind = "logistic", lo = 0.6, hi = 1.4, v = [0.0, 1.0], c = 0.0 }
            sigma = { kind = "constant", value = 1.0 }

            [[modes.modes]]
            k = [0.0, 1.0]
            alpha = { kind = "constant", value = 1.0 }
            sigma = { kind = "bump", base = 0.8, amplitude = 0.4, center = [0.0, 0.0], width = 1.0 }
        "#;
        let cfg = AppConfig::from_toml_str(doc).unwrap();
        assert_eq!(cfg.experiment.eps_list, vec![0.4, 0.2]);
        assert_eq!(cfg.experiment.n_paths, 256);
        assert_eq!(cfg.experiment.probe, AveragingProbe::DriftComponent { q: 1 });
        assert_eq!(cfg.solver.substep_c, 0.02);
        assert_eq!(cfg.solver.pde_points, 101);
        assert_eq!(cfg.modes.modes.len(), 2);
        assert!(matches!(
            cfg.modes.modes[0].alpha,
            Profile::Logistic { .. }
        ));
        // Untouched knobs keep their defaults.
        assert_eq!(cfg.solver.sde_dt, 5e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = AppConfig::from_toml_str("[solver]\nsubstep = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("config"));
    }

    #[test]
    fn bad_sections_are_rejected() {
        for doc in [
            "[experiment]\neps_list = []\n",
            "[experiment]\neps_list = [0.2, 0.4]\n",
            "[experiment]\neps_list = [0.4, 0.0]\n",
            "[experiment]\nt_horizon = -1.0\n",
            "[solver]\nsde_dt = 0.5\n",
            "[solver]\npde_points = 2\n",
            "[experiment]\nprobe = { kind = \"square_amplitude\", mode = 99 }\n",
        ] {
            assert!(AppConfig::from_toml_str(doc).is_err(), "accepted: {doc}");
        }
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let a = AppConfig::default();
        let b = AppConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        assert!(a.fingerprint().chars().all(|c| c.is_ascii_hexdigit()));

        let mut c = AppConfig::default();
        c.experiment.seed = 2;
        assert_ne!(a.fingerprint(), c.fingerprint());
        // The modes fingerprint ignores experiment and solver settings.
        assert_eq!(a.modes_fingerprint(), c.modes_fingerprint());
    }
}
