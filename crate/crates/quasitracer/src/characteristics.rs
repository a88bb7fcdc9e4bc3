//! Integration of the diffusively scaled characteristics
//!
//! `dx/dt = (1/eps) W(t/eps², x/eps, x) + U(t/eps², x/eps, x)`,
//!
//! jointly with the amplitude synthesis: `W` takes the amplitudes at slow
//! position x with phases at the fast position x/eps, `U` carries the
//! y-gradients of the amplitudes. Paths are sampled on a uniform macro
//! grid and collected into ensembles.

use crate::bank::{bank_init_stationary, CoefficientBank, DEFAULT_BANK_NODES};
use crate::ensemble::{macro_grid, TrajectoryEnsemble};
use crate::error::{Error, Result};
use crate::field::{
    dot, eval_u, eval_w, ou_exact_step, sample_invariant, ModeSet, PhaseGradient, PhasePoint,
    Vec2,
};
use crate::rng::RngStream;
use rayon::prelude::*;

/// Positions beyond this radius abort the path; the velocity field is
/// bounded, so reaching it indicates a broken configuration.
pub const BLOW_UP_GUARD: f64 = 1e6;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpsTrajectoryConfig {
    pub eps: f64,
    pub x0: Vec2,
    /// Start time of the path; timestamps run over [t0, t0 + horizon].
    pub t0: f64,
    pub horizon: f64,
    /// Micro-step coefficient; the step is `substep_c · eps²` shrunk by the
    /// field scale, see [`EpsTrajectoryConfig::micro_step`].
    pub substep_c: f64,
    pub points_per_unit: usize,
    /// Rate-grid resolution of the coefficient bank (varying profiles only).
    pub bank_nodes: usize,
}

impl EpsTrajectoryConfig {
    pub fn new(eps: f64, x0: Vec2, horizon: f64) -> Self {
        Self {
            eps,
            x0,
            t0: 0.0,
            horizon,
            substep_c: 0.05,
            points_per_unit: 64,
            bank_nodes: DEFAULT_BANK_NODES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::invalid("eps must lie in (0, 1]"));
        }
        if !(self.horizon > 0.0) || !self.t0.is_finite() {
            return Err(Error::invalid("need a positive horizon"));
        }
        if !(self.substep_c > 0.0 && self.substep_c <= 0.1) {
            return Err(Error::invalid("substep_c must lie in (0, 0.1]"));
        }
        if self.points_per_unit == 0 {
            return Err(Error::invalid("points_per_unit must be positive"));
        }
        if self.bank_nodes < 4 {
            return Err(Error::invalid("bank needs at least 4 rate nodes"));
        }
        Ok(())
    }

    /// Macro output grid shared by every path of an ensemble.
    pub fn times(&self) -> Vec<f64> {
        macro_grid(self.t0, self.t0 + self.horizon, self.points_per_unit)
    }

    /// Micro time step `substep_c · eps² / (1 + max_i |k_i| · S)` with `S`
    /// three standard deviations of the total amplitude: the drift has size
    /// S/eps and oscillates on the eps-scale, so this resolves both the
    /// phase rotation and the eps²-fast amplitude relaxation.
    pub fn micro_step(&self, modes: &ModeSet) -> f64 {
        let max_k = modes
            .modes
            .iter()
            .map(|m| dot(m.k, m.k).sqrt())
            .fold(0.0, f64::max);
        self.substep_c * self.eps * self.eps / (1.0 + max_k * amplitude_scale(modes))
    }
}

/// Three standard deviations of the amplitude sum, an a.s. useful bound on
/// the field magnitude.
fn amplitude_scale(modes: &ModeSet) -> f64 {
    3.0 * modes.modes.iter().map(|m| m.sigma.range().1).sum::<f64>()
}

/// Amplitude synthesis driving one trajectory: evaluates the phase law and
/// its y-gradients at the current slow position and advances in fast time.
/// One provider per path; providers are stateful and single-owner.
pub trait AmplitudeProvider {
    fn eval(
        &mut self,
        modes: &ModeSet,
        y: Vec2,
        p: &mut PhasePoint,
        g: &mut PhaseGradient,
    ) -> Result<()>;

    fn advance(&mut self, dtau: f64, modes: &ModeSet, rng: &mut RngStream) -> Result<()>;
}

/// Full locally stationary synthesis through the coefficient bank.
pub struct BankProvider {
    pub bank: CoefficientBank,
}

impl AmplitudeProvider for BankProvider {
    fn eval(
        &mut self,
        modes: &ModeSet,
        y: Vec2,
        p: &mut PhasePoint,
        g: &mut PhaseGradient,
    ) -> Result<()> {
        let (pp, gg) = self.bank.eval(modes, y)?;
        *p = pp;
        *g = gg;
        Ok(())
    }

    fn advance(&mut self, dtau: f64, _modes: &ModeSet, rng: &mut RngStream) -> Result<()> {
        self.bank.step(dtau, rng)
    }
}

/// Constant-profile fast path: the amplitudes do not depend on y, so the
/// slow-modulation velocity vanishes and exact OU transitions suffice.
pub struct ConstantLawProvider {
    pub state: PhasePoint,
}

impl AmplitudeProvider for ConstantLawProvider {
    fn eval(
        &mut self,
        _modes: &ModeSet,
        _y: Vec2,
        p: &mut PhasePoint,
        g: &mut PhaseGradient,
    ) -> Result<()> {
        p.a.copy_from_slice(&self.state.a);
        p.b.copy_from_slice(&self.state.b);
        for gv in g.a_y.iter_mut().chain(g.b_y.iter_mut()) {
            *gv = [0.0, 0.0];
        }
        Ok(())
    }

    fn advance(&mut self, dtau: f64, modes: &ModeSet, rng: &mut RngStream) -> Result<()> {
        self.state = ou_exact_step(&self.state, [0.0, 0.0], dtau, modes, rng);
        Ok(())
    }
}

/// Time-frozen field: a fixed amplitude draw with no evolution. Used for
/// deterministic integrator checks (reference solutions, volume
/// preservation, common-noise step refinement).
pub struct FrozenProvider {
    pub state: PhasePoint,
}

impl AmplitudeProvider for FrozenProvider {
    fn eval(
        &mut self,
        _modes: &ModeSet,
        _y: Vec2,
        p: &mut PhasePoint,
        g: &mut PhaseGradient,
    ) -> Result<()> {
        p.a.copy_from_slice(&self.state.a);
        p.b.copy_from_slice(&self.state.b);
        for gv in g.a_y.iter_mut().chain(g.b_y.iter_mut()) {
            *gv = [0.0, 0.0];
        }
        Ok(())
    }

    fn advance(&mut self, _dtau: f64, _modes: &ModeSet, _rng: &mut RngStream) -> Result<()> {
        Ok(())
    }
}

fn velocity(
    p: &PhasePoint,
    g: &PhaseGradient,
    x: Vec2,
    inv_eps: f64,
    modes: &ModeSet,
) -> Vec2 {
    let xf = [x[0] * inv_eps, x[1] * inv_eps];
    let w = eval_w(p, xf, modes);
    let u = eval_u(g, xf, modes);
    [inv_eps * w[0] + u[0], inv_eps * w[1] + u[1]]
}

/// Heun integration against a caller-supplied amplitude provider. The field
/// is held at its start-of-step time within each micro step (predictor and
/// corrector re-evaluate amplitudes at the updated slow position), then the
/// provider advances by the fast-time increment.
pub fn integrate_with_provider<P: AmplitudeProvider>(
    cfg: &EpsTrajectoryConfig,
    modes: &ModeSet,
    provider: &mut P,
    rng: &mut RngStream,
) -> Result<Vec<Vec2>> {
    integrate_with_observer(cfg, modes, provider, rng, &mut |_, _, _, _| {})
}

/// [`integrate_with_provider`] with a per-micro-step hook. Before each
/// position update the observer receives the step start time, the current
/// position, the amplitude state evaluated at that position, and the step
/// length; rectangle-rule sums of these samples converge to path
/// functionals `∫ F(x(s), a(s; x(s))) ds` as the micro step shrinks.
pub fn integrate_with_observer<P, O>(
    cfg: &EpsTrajectoryConfig,
    modes: &ModeSet,
    provider: &mut P,
    rng: &mut RngStream,
    observer: &mut O,
) -> Result<Vec<Vec2>>
where
    P: AmplitudeProvider,
    O: FnMut(f64, Vec2, &PhasePoint, f64),
{
    let times = cfg.times();
    let dt_max = cfg.micro_step(modes);
    let inv_eps = 1.0 / cfg.eps;
    let n = modes.n();
    let mut x = cfg.x0;
    let mut out = Vec::with_capacity(times.len());
    out.push(x);
    let mut p1 = PhasePoint::zeros(n);
    let mut g1 = PhaseGradient::zeros(n);
    let mut p2 = PhasePoint::zeros(n);
    let mut g2 = PhaseGradient::zeros(n);
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let k = ((span / dt_max).ceil() as usize).max(1);
        let h = span / k as f64;
        let dtau = h * inv_eps * inv_eps;
        for j in 0..k {
            provider.eval(modes, x, &mut p1, &mut g1)?;
            observer(w[0] + j as f64 * h, x, &p1, h);
            let v1 = velocity(&p1, &g1, x, inv_eps, modes);
            let xp = [x[0] + h * v1[0], x[1] + h * v1[1]];
            provider.eval(modes, xp, &mut p2, &mut g2)?;
            let v2 = velocity(&p2, &g2, xp, inv_eps, modes);
            x = [
                x[0] + 0.5 * h * (v1[0] + v2[0]),
                x[1] + 0.5 * h * (v1[1] + v2[1]),
            ];
            if !x[0].is_finite() || !x[1].is_finite() || x[0].abs().max(x[1].abs()) > BLOW_UP_GUARD
            {
                return Err(Error::numerical(format!(
                    "trajectory blew up near t = {:.4}: |x| exceeds {BLOW_UP_GUARD:.0e}",
                    w[0]
                )));
            }
            provider.advance(dtau, modes, rng)?;
        }
        out.push(x);
    }
    Ok(out)
}

/// One path of the scaled characteristics, sampled on the macro grid.
/// Constant-profile mode sets take the exact-OU fast path; otherwise the
/// amplitudes come from a stationary-initialized coefficient bank.
pub fn integrate_eps_path(
    cfg: &EpsTrajectoryConfig,
    modes: &ModeSet,
    rng: &mut RngStream,
) -> Result<Vec<Vec2>> {
    integrate_eps_path_observed(cfg, modes, rng, &mut |_, _, _, _| {})
}

/// [`integrate_eps_path`] with a per-micro-step observer; see
/// [`integrate_with_observer`] for the hook contract.
pub fn integrate_eps_path_observed<O>(
    cfg: &EpsTrajectoryConfig,
    modes: &ModeSet,
    rng: &mut RngStream,
    observer: &mut O,
) -> Result<Vec<Vec2>>
where
    O: FnMut(f64, Vec2, &PhasePoint, f64),
{
    cfg.validate()?;
    if modes.is_constant() {
        let state = sample_invariant(modes, [0.0, 0.0], rng);
        let mut provider = ConstantLawProvider { state };
        integrate_with_observer(cfg, modes, &mut provider, rng, observer)
    } else {
        let bank = bank_init_stationary(modes, cfg.bank_nodes, rng)?;
        let mut provider = BankProvider { bank };
        integrate_with_observer(cfg, modes, &mut provider, rng, observer)
    }
}

/// Independent paths from split child streams; path order and content are
/// functions of `master_seed` alone.
pub fn simulate_ensemble(
    cfg: &EpsTrajectoryConfig,
    modes: &ModeSet,
    n_paths: usize,
    master_seed: u64,
) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let root = RngStream::root(master_seed);
    let paths: Result<Vec<Vec<Vec2>>> = (0..n_paths)
        .into_par_iter()
        .map(|pid| {
            let mut rng = root.child(pid as u64);
            integrate_eps_path(cfg, modes, &mut rng)
        })
        .collect();
    TrajectoryEnsemble::new(format!("eps={}", cfg.eps), cfg.times(), paths?)
}
