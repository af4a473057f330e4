//! Reduced point-vortex systems for N coaxial rings and a fixed-step RK4 integrator.
//!
//! Four right-hand sides share one interaction term `Σ_{j≠i} (q_i - q_j)⊥/|q_i - q_j|²`:
//!
//! * [`SystemKind::XEps`]: ring centres in the half-plane, self-induction `γ/(4π X_r)`.
//! * [`SystemKind::YEps`]: the same flow in the frame `X = X* + (γ/4πr*) t e_z + Y/√L`.
//! * [`SystemKind::LimitTilde`]: the `ε → 0` limit of the moving-frame system.
//! * [`SystemKind::Marchioro`]: the limit under equal-strength self and mutual induction.
//!
//! Here `L = |ln ε|`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scalar::Real;

/// Pairs closer than this halt the integration.
pub const COLLISION_DISTANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("points {i} and {j} collided at t = {time} (distance {distance:e})")]
    Collision {
        time: f64,
        i: usize,
        j: usize,
        distance: f64,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state became non-finite at t = {time}")]
    NonFinite { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RingParams<T: Copy> {
    pub gamma: T,
    pub epsilon: T,
    pub z_star: T,
    pub r_star: T,
    /// Initial offsets `Y_{i,0}` in the rescaled frame.
    pub y0: Vec<Vec2<T>>,
    /// Per-ring circulations; only the Marchioro system reads them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<T>>,
}

impl<T: Real> RingParams<T> {
    pub fn new(gamma: T, epsilon: T, z_star: T, r_star: T, y0: Vec<Vec2<T>>) -> Result<Self, DynamicsError> {
        let p = RingParams {
            gamma,
            epsilon,
            z_star,
            r_star,
            y0,
            gammas: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gammas(mut self, gammas: Vec<T>) -> Result<Self, DynamicsError> {
        self.gammas = Some(gammas);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::Params(m));
        if !self.gamma.is_finite() || self.gamma == T::zero() {
            return bad(format!("gamma must be finite and non-zero, got {}", self.gamma));
        }
        if !(self.epsilon > T::zero() && self.epsilon < T::one()) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.log_eps() > T::one()) {
            return bad(format!("|ln epsilon| must exceed 1, got {}", self.log_eps()));
        }
        if !(self.r_star > T::zero()) || !self.r_star.is_finite() || !self.z_star.is_finite() {
            return bad(format!(
                "reference point must have finite z and r > 0, got ({}, {})",
                self.z_star, self.r_star
            ));
        }
        if self.y0.is_empty() {
            return bad("y0 must contain at least one offset".into());
        }
        if self.y0.iter().any(|y| !y.is_finite()) {
            return bad("y0 entries must be finite".into());
        }
        for i in 0..self.y0.len() {
            for j in 0..i {
                if self.y0[i].r == self.y0[j].r {
                    return bad(format!("initial radial offsets of rings {j} and {i} coincide"));
                }
            }
        }
        if let Some(g) = &self.gammas {
            if g.len() != self.y0.len() {
                return bad(format!("gammas has {} entries for {} rings", g.len(), self.y0.len()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return bad("gammas must be finite".into());
            }
        }
        Ok(())
    }

    pub fn n_rings(&self) -> usize {
        self.y0.len()
    }

    /// `L = |ln ε|`.
    pub fn log_eps(&self) -> T {
        self.epsilon.ln().abs()
    }

    pub fn sqrt_log_eps(&self) -> T {
        self.log_eps().sqrt()
    }

    pub fn x_star(&self) -> Vec2<T> {
        Vec2::new(self.z_star, self.r_star)
    }

    /// Translation speed `γ/(4π r*)` of the moving frame.
    pub fn frame_speed(&self) -> T {
        self.gamma / (T::lit(4.0) * T::PI() * self.r_star)
    }

    /// `d₀ = ¼ min_{j≠k} |Y_{j,0,r} - Y_{k,0,r}|`; infinite for a single ring.
    pub fn d0(&self) -> T {
        let mut m = T::infinity();
        for i in 0..self.y0.len() {
            for j in 0..i {
                m = m.min((self.y0[i].r - self.y0[j].r).abs());
            }
        }
        m / T::lit(4.0)
    }

    /// Strip height `h₀ = min(r*/240, 1/2)`.
    pub fn h0(&self) -> T {
        (self.r_star / T::lit(240.0)).min(T::half())
    }

    pub fn circulation(&self, i: usize) -> T {
        match &self.gammas {
            Some(g) => g[i],
            None => self.gamma,
        }
    }

    /// Initial ring centres `X* + Y_{i,0}/√L`.
    pub fn x0(&self) -> Vec<Vec2<T>> {
        let s = self.sqrt_log_eps();
        self.y0.iter().map(|&y| self.x_star() + y / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    XEps,
    YEps,
    LimitTilde,
    Marchioro,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SystemKind::XEps => "x_eps",
            SystemKind::YEps => "y_eps",
            SystemKind::LimitTilde => "limit_tilde",
            SystemKind::Marchioro => "marchioro",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Copy> {
    pub times: Vec<T>,
    pub states: Vec<Vec<Vec2<T>>>,
    pub kind: SystemKind,
    pub params: RingParams<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[Vec2<T>]> {
        self.states.last().map(|s| s.as_slice())
    }
}

/// `Σ_{j≠i} (q_i - q_j)⊥/|q_i - q_j|²`.
fn interaction<T: Real>(q: &[Vec2<T>], i: usize) -> Result<Vec2<T>, DynamicsError> {
    let mut acc = Vec2::zero();
    for (j, &qj) in q.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = q[i] - qj;
        let n2 = d.norm_sq();
        if n2 == T::zero() {
            return Err(DynamicsError::Collision {
                time: f64::NAN,
                i: i.min(j),
                j: i.max(j),
                distance: 0.0,
            });
        }
        acc += d.perp() / n2;
    }
    Ok(acc)
}

fn check_finite<T: Real>(q: &[Vec2<T>]) -> Result<(), DynamicsError> {
    if q.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFinite { time: f64::NAN })
    }
}

/// `dX_i/dt = γ/(4π X_{i,r}) e_z + (γ/(2πL)) Σ_{j≠i} (X_i - X_j)⊥/|X_i - X_j|²`.
pub fn xsystem_rhs<T: Real>(x: &[Vec2<T>], p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    check_finite(x)?;
    let tau = T::TAU();
    let coupling = p.gamma / (tau * p.log_eps());
    (0..x.len())
        .map(|i| {
            if !(x[i].r > T::zero()) {
                return Err(DynamicsError::Domain(format!(
                    "ring {i} has non-positive radius {}",
                    x[i].r
                )));
            }
            let self_speed = p.gamma / (T::two() * tau * x[i].r);
            Ok(Vec2::e_z() * self_speed + interaction(x, i)? * coupling)
        })
        .collect()
}

/// Moving-frame system
/// `dY_i/dt = (γ/2π) Σ (Y_i - Y_j)⊥/|Y_i - Y_j|² + √L (γ/4πr*) (1/(1 + Y_{i,r}/(r*√L)) - 1) e_z`.
pub fn yeps_rhs<T: Real>(y: &[Vec2<T>], p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    check_finite(y)?;
    let sl = p.sqrt_log_eps();
    let coupling = p.gamma / T::TAU();
    let vertical = sl * p.frame_speed();
    (0..y.len())
        .map(|i| {
            let a = y[i].r / (p.r_star * sl);
            let denom = T::one() + a;
            if !(denom > T::zero()) {
                return Err(DynamicsError::Domain(format!(
                    "ring {i} maps to non-positive radius (1 + Y_r/(r*√L) = {denom})"
                )));
            }
            // 1/(1+a) - 1 = -a/(1+a), without the cancellation.
            let drift = -a / denom;
            Ok(interaction(y, i)? * coupling + Vec2::e_z() * (vertical * drift))
        })
        .collect()
}

/// `dỸ_i/dt = (γ/2π) Σ (Ỹ_i - Ỹ_j)⊥/|Ỹ_i - Ỹ_j|² - (γ/4πr*²) Ỹ_{i,r} e_z`.
pub fn limit_rhs<T: Real>(y: &[Vec2<T>], p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    check_finite(y)?;
    let coupling = p.gamma / T::TAU();
    let decel = p.frame_speed() / p.r_star;
    (0..y.len())
        .map(|i| Ok(interaction(y, i)? * coupling - Vec2::e_z() * (decel * y[i].r)))
        .collect()
}

/// `dỸ_i/dt = (γ_i/2π) Σ (Ỹ_i - Ỹ_j)⊥/|Ỹ_i - Ỹ_j|² + (γ_i/4πr*) e_z`.
pub fn marchioro_rhs<T: Real>(y: &[Vec2<T>], p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    check_finite(y)?;
    let tau = T::TAU();
    (0..y.len())
        .map(|i| {
            let g = p.circulation(i);
            let lia = g / (T::two() * tau * p.r_star);
            Ok(interaction(y, i)? * (g / tau) + Vec2::e_z() * lia)
        })
        .collect()
}

pub fn rhs<T: Real>(kind: SystemKind, q: &[Vec2<T>], p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    match kind {
        SystemKind::XEps => xsystem_rhs(q, p),
        SystemKind::YEps => yeps_rhs(q, p),
        SystemKind::LimitTilde => limit_rhs(q, p),
        SystemKind::Marchioro => marchioro_rhs(q, p),
    }
}

/// `X_i = X* + (γ/4πr*) t e_z + Y_i/√L`.
pub fn yframe_to_x<T: Real>(y: &[Vec2<T>], t: T, p: &RingParams<T>) -> Result<Vec<Vec2<T>>, DynamicsError> {
    let sl = p.sqrt_log_eps();
    let origin = p.x_star() + Vec2::e_z() * (p.frame_speed() * t);
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let x = origin + yi / sl;
            if x.r > T::zero() {
                Ok(x)
            } else {
                Err(DynamicsError::Domain(format!("ring {i} maps to radius {}", x.r)))
            }
        })
        .collect()
}

/// Inverse of [`yframe_to_x`].
pub fn x_to_yframe<T: Real>(x: &[Vec2<T>], t: T, p: &RingParams<T>) -> Vec<Vec2<T>> {
    let sl = p.sqrt_log_eps();
    let origin = p.x_star() + Vec2::e_z() * (p.frame_speed() * t);
    x.iter().map(|&xi| (xi - origin) * sl).collect()
}

/// `Ŷ_i = Y_i - (1/N) Σ_j Y_j`.
pub fn centered_positions<T: Real>(y: &[Vec2<T>]) -> Vec<Vec2<T>> {
    if y.is_empty() {
        return Vec::new();
    }
    let n = T::from_usize_lossy(y.len());
    let mut sum = Vec2::zero();
    for &v in y {
        sum += v;
    }
    let mean = sum / n;
    y.iter().map(|&v| v - mean).collect()
}

fn axpy<T: Real>(q: &[Vec2<T>], k: &[Vec2<T>], h: T) -> Vec<Vec2<T>> {
    q.iter().zip(k).map(|(&a, &b)| a + b * h).collect()
}

/// One classical RK4 step of signed size `h`.
pub fn rk4_step<T: Real>(
    kind: SystemKind,
    q: &[Vec2<T>],
    h: T,
    p: &RingParams<T>,
) -> Result<Vec<Vec2<T>>, DynamicsError> {
    let half = h * T::half();
    let k1 = rhs(kind, q, p)?;
    let k2 = rhs(kind, &axpy(q, &k1, half), p)?;
    let k3 = rhs(kind, &axpy(q, &k2, half), p)?;
    let k4 = rhs(kind, &axpy(q, &k3, h), p)?;
    let sixth = h / T::lit(6.0);
    Ok(q.iter()
        .enumerate()
        .map(|(i, &a)| a + (k1[i] + (k2[i] + k3[i]) * T::two() + k4[i]) * sixth)
        .collect())
}

fn closest_pair<T: Real>(q: &[Vec2<T>]) -> Option<(usize, usize, T)> {
    let mut best: Option<(usize, usize, T)> = None;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            let d = (q[i] - q[j]).norm();
            if best.is_none_or(|b| d < b.2) {
                best = Some((i, j, d));
            }
        }
    }
    best
}

/// Integration failure with every state accepted before it.
#[derive(Debug, Clone)]
pub struct IntegrationError<T: Copy> {
    pub cause: DynamicsError,
    pub partial: Trajectory<T>,
}

impl<T: Real> fmt::Display for IntegrationError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} recorded states)", self.cause, self.partial.len())
    }
}

impl<T: Real> std::error::Error for IntegrationError<T> {}

/// Fixed-step RK4 from `t_span.0` to `t_span.1` (either direction). The step count
/// is `⌈|Δt|/step⌉` and every step has the same size, so the endpoint is hit
/// exactly. Every accepted state is recorded.
#[allow(clippy::result_large_err)]
pub fn integrate<T: Real>(
    kind: SystemKind,
    y0: &[Vec2<T>],
    t_span: (T, T),
    step: T,
    p: &RingParams<T>,
) -> Result<Trajectory<T>, IntegrationError<T>> {
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        kind,
        params: p.clone(),
    };
    let fail = |cause: DynamicsError, traj: Trajectory<T>| Err(IntegrationError { cause, partial: traj });
    if !(step > T::zero()) || !step.is_finite() {
        return fail(
            DynamicsError::Params(format!("step must be positive, got {step}")),
            traj,
        );
    }
    if !t_span.0.is_finite() || !t_span.1.is_finite() {
        return fail(DynamicsError::Params("time span must be finite".into()), traj);
    }
    let thresh = T::lit(COLLISION_DISTANCE);
    let collided = |q: &[Vec2<T>], t: T| -> Option<DynamicsError> {
        closest_pair(q).and_then(|(i, j, d)| {
            (d < thresh).then(|| DynamicsError::Collision {
                time: t.to_f64_lossy(),
                i,
                j,
                distance: d.to_f64_lossy(),
            })
        })
    };
    if let Some(e) = collided(y0, t_span.0) {
        return fail(e, traj);
    }
    let span = t_span.1 - t_span.0;
    let ratio = span.abs() / step;
    // Tolerate rounding in spans that are an integer multiple of the step.
    let mut n = ratio.round();
    if (ratio - n).abs() > T::lit(1e-9) * ratio.max(T::one()) {
        n = ratio.ceil();
    }
    let n = n.to_usize().unwrap_or(0);
    let h = if n == 0 {
        T::zero()
    } else {
        span / T::from_usize_lossy(n)
    };

    traj.times.push(t_span.0);
    traj.states.push(y0.to_vec());
    let mut q = y0.to_vec();
    for k in 1..=n {
        let t_prev = traj.times[traj.times.len() - 1];
        let next = match rk4_step(kind, &q, h, p) {
            Ok(v) => v,
            Err(e) => return fail(stamp(e, t_prev), traj),
        };
        let t = if k == n {
            t_span.1
        } else {
            t_span.0 + h * T::from_usize_lossy(k)
        };
        if next.iter().any(|v| !v.is_finite()) {
            return fail(DynamicsError::NonFinite { time: t.to_f64_lossy() }, traj);
        }
        if let Some(e) = collided(&next, t) {
            return fail(e, traj);
        }
        q = next;
        traj.times.push(t);
        traj.states.push(q.clone());
    }
    Ok(traj)
}

fn stamp<T: Real>(e: DynamicsError, t: T) -> DynamicsError {
    let t = t.to_f64_lossy();
    match e {
        DynamicsError::Collision { i, j, distance, .. } => DynamicsError::Collision {
            time: t,
            i,
            j,
            distance,
        },
        DynamicsError::NonFinite { .. } => DynamicsError::NonFinite { time: t },
        other => other,
    }
}
