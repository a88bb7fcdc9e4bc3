//! Mode set, slowly varying coefficient profiles, and the quasi-periodic
//! stream function / velocity field.
//!
//! The flow is two-dimensional. Each mode carries a wavevector `k_i` and a
//! pair of amplitude processes `(a_i, b_i)`; at frozen slow position `y` the
//! amplitudes are stationary Ornstein–Uhlenbeck processes with rate
//! `alpha_i(y)` and stationary standard deviation `sigma_i(y)`. The stream
//! function is
//!
//! `H(x) = sum_i a_i cos(k_i·x) + b_i sin(k_i·x)`
//!
//! and the velocity splits into the fast part `W = grad_perp_x H` and the
//! slow-modulation part `U = grad_perp_y H`, with the perp convention
//! `v_perp = (v_2, -v_1)` used for wavevectors and gradients alike.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

pub type Vec2 = [f64; 2];

#[inline]
pub fn dot(u: Vec2, v: Vec2) -> f64 {
    u[0] * v[0] + u[1] * v[1]
}

/// Perpendicular vector, `(v_2, -v_1)`. Applied to a wavevector this is
/// `k_perp`; applied to a y-gradient it realizes `grad_perp_y`.
#[inline]
pub fn perp(v: Vec2) -> Vec2 {
    [v[1], -v[0]]
}

/// Signed cross product `delta(k, l) = k_1 l_2 - k_2 l_1 = k · l_perp`.
#[inline]
pub fn cross(k: Vec2, l: Vec2) -> f64 {
    k[0] * l[1] - k[1] * l[0]
}

/// A scalar coefficient profile over the slow variable with hand-coded
/// first and second derivatives.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant {
        value: f64,
    },
    /// `lo + (hi-lo) * s(v·y - c)` with `s` the logistic sigmoid; takes
    /// values in the open interval (lo, hi), so bounds are respected exactly.
    Logistic {
        lo: f64,
        hi: f64,
        v: Vec2,
        c: f64,
    },
    /// `base + amplitude * exp(-|y-center|² / (2 width²))`.
    Bump {
        base: f64,
        amplitude: f64,
        center: Vec2,
        width: f64,
    },
}

impl Profile {
    pub fn value(&self, y: Vec2) -> f64 {
        match *self {
            Profile::Constant { value } => value,
            Profile::Logistic { lo, hi, v, c } => {
                let s = sigmoid(dot(v, y) - c);
                lo + (hi - lo) * s
            }
            Profile::Bump {
                base,
                amplitude,
                center,
                width,
            } => {
                let dx = [y[0] - center[0], y[1] - center[1]];
                base + amplitude * (-dot(dx, dx) / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn grad(&self, y: Vec2) -> Vec2 {
        match *self {
            Profile::Constant { .. } => [0.0, 0.0],
            Profile::Logistic { lo, hi, v, c } => {
                let s = sigmoid(dot(v, y) - c);
                let ds = s * (1.0 - s);
                [(hi - lo) * ds * v[0], (hi - lo) * ds * v[1]]
            }
            Profile::Bump {
                amplitude,
                center,
                width,
                ..
            } => {
                let dx = [y[0] - center[0], y[1] - center[1]];
                let w2 = width * width;
                let e = amplitude * (-dot(dx, dx) / (2.0 * w2)).exp();
                [-e * dx[0] / w2, -e * dx[1] / w2]
            }
        }
    }

    pub fn hessian(&self, y: Vec2) -> [[f64; 2]; 2] {
        match *self {
            Profile::Constant { .. } => [[0.0; 2]; 2],
            Profile::Logistic { lo, hi, v, c } => {
                let s = sigmoid(dot(v, y) - c);
                // s'' = s(1-s)(1-2s)
                let dds = s * (1.0 - s) * (1.0 - 2.0 * s);
                let f = (hi - lo) * dds;
                [
                    [f * v[0] * v[0], f * v[0] * v[1]],
                    [f * v[1] * v[0], f * v[1] * v[1]],
                ]
            }
            Profile::Bump {
                amplitude,
                center,
                width,
                ..
            } => {
                let dx = [y[0] - center[0], y[1] - center[1]];
                let w2 = width * width;
                let e = amplitude * (-dot(dx, dx) / (2.0 * w2)).exp();
                let mut h = [[0.0; 2]; 2];
                for p in 0..2 {
                    for q in 0..2 {
                        let id = if p == q { 1.0 } else { 0.0 };
                        h[p][q] = e * (dx[p] * dx[q] / (w2 * w2) - id / w2);
                    }
                }
                h
            }
        }
    }

    /// Tight bounds on the values the profile can attain.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            Profile::Constant { value } => (value, value),
            Profile::Logistic { lo, hi, .. } => (lo.min(hi), lo.max(hi)),
            Profile::Bump {
                base, amplitude, ..
            } => (base.min(base + amplitude), base.max(base + amplitude)),
        }
    }

    /// Reflects the profile through the origin: returns p' with p'(y) = p(-y).
    pub fn reflect(&self) -> Profile {
        match self.clone() {
            p @ Profile::Constant { .. } => p,
            Profile::Logistic { lo, hi, v, c } => Profile::Logistic {
                lo,
                hi,
                v: [-v[0], -v[1]],
                c,
            },
            Profile::Bump {
                base,
                amplitude,
                center,
                width,
            } => Profile::Bump {
                base,
                amplitude,
                center: [-center[0], -center[1]],
                width,
            },
        }
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// One Fourier mode of the stream function.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Mode {
    pub k: Vec2,
    pub alpha: Profile,
    pub sigma: Profile,
}

/// The full mode set together with the global coefficient bounds.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModeSet {
    pub gamma0: f64,
    pub sigma_star: f64,
    pub modes: Vec<Mode>,
}

impl ModeSet {
    pub fn new(gamma0: f64, sigma_star: f64, modes: Vec<Mode>) -> Result<Self> {
        let set = ModeSet {
            gamma0,
            sigma_star,
            modes,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma0 && self.gamma0 < 1.0) {
            return Err(Error::invalid(format!(
                "gamma0 must lie in (0,1), got {}",
                self.gamma0
            )));
        }
        if !(0.0 < self.sigma_star && self.sigma_star < 1.0) {
            return Err(Error::invalid(format!(
                "sigma_star must lie in (0,1), got {}",
                self.sigma_star
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::invalid("mode set is empty"));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if dot(m.k, m.k) == 0.0 || !m.k[0].is_finite() || !m.k[1].is_finite() {
                return Err(Error::invalid(format!("mode {i}: k must be nonzero finite")));
            }
            let (lo, hi) = m.alpha.range();
            if lo < self.gamma0 - 1e-12 || hi > 1.0 / self.gamma0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "mode {i}: alpha range [{lo}, {hi}] exceeds [{}, {}]",
                    self.gamma0,
                    1.0 / self.gamma0
                )));
            }
            let (lo, hi) = m.sigma.range();
            if lo < self.sigma_star - 1e-12 || hi > 1.0 / self.sigma_star + 1e-12 {
                return Err(Error::invalid(format!(
                    "mode {i}: sigma range [{lo}, {hi}] exceeds [{}, {}]",
                    self.sigma_star,
                    1.0 / self.sigma_star
                )));
            }
            for m2 in &self.modes[..i] {
                if m2.k == m.k {
                    return Err(Error::invalid(format!("duplicate wavevector {:?}", m.k)));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.modes.len()
    }

    pub fn alpha(&self, i: usize, y: Vec2) -> f64 {
        self.modes[i].alpha.value(y)
    }

    pub fn sigma(&self, i: usize, y: Vec2) -> f64 {
        self.modes[i].sigma.value(y)
    }

    /// True when no coefficient depends on y (then U vanishes identically).
    pub fn is_constant(&self) -> bool {
        self.modes
            .iter()
            .all(|m| matches!(m.alpha, Profile::Constant { .. }) && matches!(m.sigma, Profile::Constant { .. }))
    }

    /// Mirror image of the mode set: every profile reflected through y = 0.
    pub fn reflect(&self) -> ModeSet {
        ModeSet {
            gamma0: self.gamma0,
            sigma_star: self.sigma_star,
            modes: self
                .modes
                .iter()
                .map(|m| Mode {
                    k: m.k,
                    alpha: m.alpha.reflect(),
                    sigma: m.sigma.reflect(),
                })
                .collect(),
        }
    }

    /// Reference configuration: three modes, unit coefficients, constant profiles.
    pub fn default_constant() -> ModeSet {
        let ks = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        ModeSet::new(
            0.5,
            0.5,
            ks.iter()
                .map(|&k| Mode {
                    k,
                    alpha: Profile::Constant { value: 1.0 },
                    sigma: Profile::Constant { value: 1.0 },
                })
                .collect(),
        )
        .expect("reference mode set is valid")
    }
}

/// The amplitude vector `(a_i, b_i)` at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PhasePoint {
    pub fn zeros(n: usize) -> Self {
        PhasePoint {
            a: vec![0.0; n],
            b: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }
}

/// y-derivatives of the amplitudes: row i holds `(∂a_i/∂y_1, ∂a_i/∂y_2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGradient {
    pub a_y: Vec<Vec2>,
    pub b_y: Vec<Vec2>,
}

impl PhaseGradient {
    pub fn zeros(n: usize) -> Self {
        PhaseGradient {
            a_y: vec![[0.0; 2]; n],
            b_y: vec![[0.0; 2]; n],
        }
    }
}

/// Draws `(a_i, b_i)` from the invariant product measure at y: independent
/// centered Gaussians with variance `sigma_i(y)²`.
pub fn sample_invariant(modes: &ModeSet, y: Vec2, rng: &mut RngStream) -> PhasePoint {
    let n = modes.n();
    let mut p = PhasePoint::zeros(n);
    for i in 0..n {
        let s = modes.sigma(i, y);
        p.a[i] = s * rng.normal();
        p.b[i] = s * rng.normal();
    }
    p
}

/// Exact Ornstein–Uhlenbeck transition over `dt` at frozen y: each coordinate
/// is multiplied by `e^{-alpha dt}` and receives independent Gaussian noise of
/// variance `sigma²(1 - e^{-2 alpha dt})`.
pub fn ou_exact_step(
    state: &PhasePoint,
    y: Vec2,
    dt: f64,
    modes: &ModeSet,
    rng: &mut RngStream,
) -> PhasePoint {
    debug_assert!(dt > 0.0);
    let n = modes.n();
    let mut out = PhasePoint::zeros(n);
    for i in 0..n {
        let alpha = modes.alpha(i, y);
        let sigma = modes.sigma(i, y);
        let m = (-alpha * dt).exp();
        let s = sigma * (1.0 - m * m).sqrt();
        out.a[i] = m * state.a[i] + s * rng.normal();
        out.b[i] = m * state.b[i] + s * rng.normal();
    }
    out
}

/// The rotation group: each pair `(a_i, b_i)` is rotated by the angle `k_i·x`.
pub fn rotate(p: &PhasePoint, x: Vec2, modes: &ModeSet) -> PhasePoint {
    let n = modes.n();
    let mut out = PhasePoint::zeros(n);
    for i in 0..n {
        let th = dot(modes.modes[i].k, x);
        let (s, c) = th.sin_cos();
        out.a[i] = p.a[i] * c + p.b[i] * s;
        out.b[i] = -p.a[i] * s + p.b[i] * c;
    }
    out
}

/// Rotates a phase gradient by the same per-mode angles as [`rotate`].
pub fn rotate_gradient(g: &PhaseGradient, x: Vec2, modes: &ModeSet) -> PhaseGradient {
    let n = modes.n();
    let mut out = PhaseGradient::zeros(n);
    for i in 0..n {
        let th = dot(modes.modes[i].k, x);
        let (s, c) = th.sin_cos();
        for j in 0..2 {
            out.a_y[i][j] = g.a_y[i][j] * c + g.b_y[i][j] * s;
            out.b_y[i][j] = -g.a_y[i][j] * s + g.b_y[i][j] * c;
        }
    }
    out
}

/// Stream function `H` at fast position x.
pub fn eval_h(p: &PhasePoint, x: Vec2, modes: &ModeSet) -> f64 {
    let mut h = 0.0;
    for i in 0..modes.n() {
        let th = dot(modes.modes[i].k, x);
        let (s, c) = th.sin_cos();
        h += p.a[i] * c + p.b[i] * s;
    }
    h
}

/// Fast velocity `W = grad_perp_x H = sum_i k_i_perp (-a_i sin + b_i cos)`.
pub fn eval_w(p: &PhasePoint, x: Vec2, modes: &ModeSet) -> Vec2 {
    let mut w = [0.0, 0.0];
    for i in 0..modes.n() {
        let k = modes.modes[i].k;
        let th = dot(k, x);
        let (s, c) = th.sin_cos();
        let amp = -p.a[i] * s + p.b[i] * c;
        let kp = perp(k);
        w[0] += kp[0] * amp;
        w[1] += kp[1] * amp;
    }
    w
}

/// The drift functional `w(𝔞) = sum_i k_i_perp b_i`; `W(𝔞, x) = w(rotate(𝔞, x))`.
pub fn w_functional(p: &PhasePoint, modes: &ModeSet) -> Vec2 {
    let mut w = [0.0, 0.0];
    for i in 0..modes.n() {
        let kp = perp(modes.modes[i].k);
        w[0] += kp[0] * p.b[i];
        w[1] += kp[1] * p.b[i];
    }
    w
}

/// Slow-modulation velocity
/// `U = sum_i (a_{i,y})_perp cos(k_i·x) + (b_{i,y})_perp sin(k_i·x)`.
pub fn eval_u(g: &PhaseGradient, x: Vec2, modes: &ModeSet) -> Vec2 {
    let mut u = [0.0, 0.0];
    for i in 0..modes.n() {
        let th = dot(modes.modes[i].k, x);
        let (s, c) = th.sin_cos();
        let ap = perp(g.a_y[i]);
        let bp = perp(g.b_y[i]);
        u[0] += ap[0] * c + bp[0] * s;
        u[1] += ap[1] * c + bp[1] * s;
    }
    u
}

/// Full velocity `V = W + eps U`, with amplitudes and gradients already
/// evaluated at the slow position and phases at the fast position.
pub fn eval_v(p: &PhasePoint, g: &PhaseGradient, x: Vec2, eps: f64, modes: &ModeSet) -> Vec2 {
    let w = eval_w(p, x, modes);
    let u = eval_u(g, x, modes);
    [w[0] + eps * u[0], w[1] + eps * u[1]]
}
