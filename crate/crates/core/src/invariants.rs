//! Conserved quantities, growth bounds and comparison envelopes for the reduced
//! systems, plus the mass-rearrangement bound and its discrete oracle.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{rhs, DynamicsError, RingParams, SystemKind, Trajectory};
use crate::geom::Vec2;
use crate::quadrature::{integrate, QuadOptions, QuadratureError};
use crate::scalar::Real;
use crate::summation::CompensatedSum;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvariantError {
    #[error("points {i} and {j} coincide")]
    Coincident { i: usize, j: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("quadrature failed: {0}")]
    Evaluation(#[from] QuadratureError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A named time series with its maximum relative deviation from the first value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub name: String,
    pub values: Vec<f64>,
    pub drift: f64,
    pub bound_satisfied: bool,
}

impl InvariantReport {
    /// `drift = max_t |v(t) - v(0)| / |v(0)|` (absolute when `v(0) = 0`).
    pub fn from_series(name: &str, values: Vec<f64>, tol: f64) -> Self {
        let v0 = values.first().copied().unwrap_or(0.0);
        let scale = if v0 == 0.0 { 1.0 } else { v0.abs() };
        let drift = values.iter().map(|v| (v - v0).abs() / scale).fold(0.0, f64::max);
        InvariantReport {
            name: name.to_string(),
            values,
            drift,
            bound_satisfied: drift <= tol,
        }
    }
}

/// `H₀ = ½ Σ_{i≠j} ln|q_i - q_j| + (1/4r*²) Σ q_{i,r}²`.
pub fn hamiltonian<T: Real>(q: &[Vec2<T>], p: &RingParams<T>) -> Result<T, InvariantError> {
    let mut acc = CompensatedSum::new();
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            let d = (q[i] - q[j]).norm();
            if d == T::zero() {
                return Err(InvariantError::Coincident { i, j });
            }
            // ordered pairs (i, j) and (j, i) with weight ½ each
            acc.add(d.ln());
        }
    }
    let quad: T = q.iter().map(|x| x.r * x.r).sum();
    Ok(acc.value() + quad / (T::lit(4.0) * p.r_star * p.r_star))
}

/// `I = ½ Σ |q_i|²`.
pub fn angular_momentum<T: Real>(q: &[Vec2<T>]) -> T {
    q.iter().map(|x| x.norm_sq()).sum::<T>() * T::half()
}

pub const MOMENTUM_SLACK: f64 = 1e-6;

/// Growth rate `γ/(8πr*²)` of the stated angular-momentum bound.
pub fn stated_momentum_rate(gamma: f64, r_star: f64) -> f64 {
    gamma / (8.0 * std::f64::consts::PI * r_star * r_star)
}

/// Growth rate `γ/(4πr*²)` implied by `|Σ q_r q_z| ≤ I`; the stated rate is half of it
/// and is exceeded by exact limit-system orbits.
pub fn sharp_momentum_rate(gamma: f64, r_star: f64) -> f64 {
    2.0 * stated_momentum_rate(gamma, r_star)
}

/// Checks `I(t) ≤ I(0) e^{rate·t} (1 + 1e-6)` for a series sampled at `times`.
pub fn momentum_series_check(times: &[f64], values: &[f64], rate: f64) -> InvariantReport {
    let i0 = values.first().copied().unwrap_or(0.0);
    let t0 = times.first().copied().unwrap_or(0.0);
    let ok = times
        .iter()
        .zip(values)
        .all(|(&t, &v)| v <= i0 * (rate * (t - t0)).exp() * (1.0 + MOMENTUM_SLACK));
    let mut rep = InvariantReport::from_series("angular_momentum", values.to_vec(), f64::INFINITY);
    rep.bound_satisfied = ok;
    rep
}

/// Largest `I(t) / (I(0) e^{rate·t})` over the series.
pub fn momentum_bound_ratio(times: &[f64], values: &[f64], rate: f64) -> f64 {
    let i0 = values.first().copied().unwrap_or(0.0);
    let t0 = times.first().copied().unwrap_or(0.0);
    times
        .iter()
        .zip(values)
        .map(|(&t, &v)| {
            if i0 == 0.0 {
                if v == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                v / (i0 * (rate * (t - t0)).exp())
            }
        })
        .fold(0.0, f64::max)
}

/// Stated angular-momentum bound `I(t) ≤ I(0) e^{γt/(8πr*²)}` along a trajectory.
pub fn momentum_bound_check<T: Real>(traj: &Trajectory<T>, p: &RingParams<T>) -> InvariantReport {
    let times: Vec<f64> = traj.times.iter().map(|t| t.to_f64_lossy()).collect();
    let values: Vec<f64> = traj.states.iter().map(|s| angular_momentum(s).to_f64_lossy()).collect();
    momentum_series_check(
        &times,
        &values,
        stated_momentum_rate(p.gamma.to_f64_lossy(), p.r_star.to_f64_lossy()),
    )
}

/// Margin of the no-collision estimate
/// `Σ_{i≠j, |q_i-q_j|<1} |ln|q_i - q_j|| ≤ 2N√N √I - 2H₀ + I/(2r*²)`,
/// right side minus left side, with `h0` the Hamiltonian of the initial state.
pub fn log_sum_separation_bound<T: Real>(q: &[Vec2<T>], h0: T, p: &RingParams<T>) -> Result<T, InvariantError> {
    let n = T::from_usize_lossy(q.len());
    let mut lhs = CompensatedSum::new();
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            let d = (q[i] - q[j]).norm();
            if d == T::zero() {
                return Err(InvariantError::Coincident { i, j });
            }
            if d < T::one() {
                lhs.add(T::two() * d.ln().abs());
            }
        }
    }
    let i_mom = angular_momentum(q);
    let rhs = T::two() * n * n.sqrt() * i_mom.sqrt() - T::two() * h0 + i_mom / (T::two() * p.r_star * p.r_star);
    Ok(rhs - lhs.value())
}

fn frame_ratio<T: Real>(y_r: T, p: &RingParams<T>) -> Result<T, InvariantError> {
    let a = y_r / (p.r_star * p.sqrt_log_eps());
    if T::one() + a > T::zero() {
        Ok(a)
    } else {
        Err(InvariantError::Domain(format!(
            "frame denominator 1 + {a} is not positive"
        )))
    }
}

/// Axial velocity of `(Y₁ + Y₂)/2` under the moving-frame system:
/// `√L (γ/8πr*) (1/(1 + a₁) + 1/(1 + a₂) - 2)`, `a_i = Y_{i,r}/(r*√L)`.
/// Its radial part vanishes identically.
pub fn com_drift_rate<T: Real>(y: &[Vec2<T>], p: &RingParams<T>) -> Result<T, InvariantError> {
    if y.len() != 2 {
        return Err(InvariantError::Input(format!(
            "drift law needs exactly 2 rings, got {}",
            y.len()
        )));
    }
    let a1 = frame_ratio(y[0].r, p)?;
    let a2 = frame_ratio(y[1].r, p)?;
    // 1/(1+a) - 1 = -a/(1+a)
    let bracket = -a1 / (T::one() + a1) - a2 / (T::one() + a2);
    Ok(p.sqrt_log_eps() * p.gamma / (T::lit(8.0) * T::PI() * p.r_star) * bracket)
}

/// Second-order surrogate `(γ/8π)(Y_{1,r}² + Y_{2,r}²)/(r*³ √L)`.
pub fn com_drift_taylor<T: Real>(y: &[Vec2<T>], p: &RingParams<T>) -> T {
    let s: T = y.iter().map(|v| v.r * v.r).sum();
    p.gamma / (T::lit(8.0) * T::PI()) * s / (p.r_star.powi(3) * p.sqrt_log_eps())
}

fn tuple_distance<T: Real>(a: &[Vec2<T>], b: &[Vec2<T>]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y).norm_sq()).sum::<T>().sqrt()
}

/// Outcome of a Gronwall envelope test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallCheck {
    pub holds: bool,
    /// `max_t |y - z| / envelope(t)`.
    pub worst_ratio: f64,
}

pub const GRONWALL_SLACK: f64 = 1e-9;

/// Tests `|y(t) - z(t)| ≤ (∫₀ᵗ g + |y(0) - z(0)|) e^{κt} + 1e-9` at every sample,
/// with the Euclidean norm on the stacked state.
pub fn gronwall_envelope<T: Real, G: Fn(T) -> T>(
    times: &[T],
    y: &[Vec<Vec2<T>>],
    z: &[Vec<Vec2<T>>],
    kappa: T,
    g_integral: G,
) -> Result<GronwallCheck, InvariantError> {
    if times.len() != y.len() || times.len() != z.len() {
        return Err(InvariantError::Input(format!(
            "time grid has {} samples but trajectories have {} and {}",
            times.len(),
            y.len(),
            z.len()
        )));
    }
    if !(kappa >= T::zero()) {
        return Err(InvariantError::Input(format!(
            "kappa must be non-negative, got {kappa}"
        )));
    }
    if times.is_empty() {
        return Ok(GronwallCheck {
            holds: true,
            worst_ratio: 0.0,
        });
    }
    let t0 = times[0];
    let gap0 = tuple_distance(&y[0], &z[0]);
    let mut holds = true;
    let mut worst = 0.0_f64;
    for k in 0..times.len() {
        let t = times[k] - t0;
        let env = (g_integral(t) + gap0) * (kappa * t).exp();
        let d = tuple_distance(&y[k], &z[k]);
        if d > env + T::lit(GRONWALL_SLACK) {
            holds = false;
        }
        if env > T::zero() {
            worst = worst.max((d / env).to_f64_lossy());
        }
    }
    Ok(GronwallCheck {
        holds,
        worst_ratio: worst,
    })
}

/// Frobenius norm of the central-difference Jacobian of a system's right-hand side.
/// Bounds the Euclidean operator norm from above.
pub fn jacobian_norm<T: Real>(kind: SystemKind, q: &[Vec2<T>], p: &RingParams<T>) -> Result<T, InvariantError> {
    let h = T::epsilon().cbrt();
    let mut fro = T::zero();
    let mut probe = q.to_vec();
    for i in 0..q.len() {
        for comp in 0..2 {
            let set = |v: &mut Vec<Vec2<T>>, delta: T| {
                if comp == 0 {
                    v[i].z = q[i].z + delta;
                } else {
                    v[i].r = q[i].r + delta;
                }
            };
            let step = h * (if comp == 0 { q[i].z } else { q[i].r }).abs().max(T::one());
            set(&mut probe, step);
            let plus = rhs(kind, &probe, p)?;
            set(&mut probe, -step);
            let minus = rhs(kind, &probe, p)?;
            set(&mut probe, T::zero());
            for (a, b) in plus.iter().zip(&minus) {
                fro += ((*a - *b) / (T::two() * step)).norm_sq();
            }
        }
    }
    Ok(fro.sqrt())
}

/// `κ = max` of [`jacobian_norm`] over the given states.
pub fn lipschitz_estimate<T: Real>(
    kind: SystemKind,
    states: &[Vec<Vec2<T>>],
    p: &RingParams<T>,
) -> Result<T, InvariantError> {
    let mut k = T::zero();
    for s in states {
        k = k.max(jacobian_norm(kind, s, p)?);
    }
    Ok(k)
}

/// Constants of the exterior-field bounds: `C_F = γC*/d₀`, `C'_F = γC*/d₀²`,
/// the strip height `h₀` and the time horizon `T₀ = 1/(24 C'_F)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapConstants {
    pub c_star: f64,
    pub c_f: f64,
    pub c_f_prime: f64,
    pub h0: f64,
    pub t0_max: f64,
}

pub fn bootstrap_constants(p: &RingParams<f64>, c_star: f64) -> BootstrapConstants {
    let d0 = p.d0();
    let c_f = p.gamma.abs() * c_star / d0;
    let c_f_prime = p.gamma.abs() * c_star / (d0 * d0);
    BootstrapConstants {
        c_star,
        c_f,
        c_f_prime,
        h0: p.h0(),
        t0_max: 1.0 / (24.0 * c_f_prime),
    }
}

// ---------------------------------------------------------------------------
// Mass rearrangement

/// Non-increasing, non-negative radial weight `g` with a density cap `M` and a
/// total mass; the extremal density is `M·1_{B(0,R)}`, `R = √(mass/(πM))`.
#[derive(Clone)]
pub struct RadialProfile<T> {
    pub g: Arc<dyn Fn(T) -> T + Send + Sync>,
    pub cap: T,
    pub gamma_mass: T,
}

impl<T: Real> std::fmt::Debug for RadialProfile<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RadialProfile")
            .field("cap", &self.cap)
            .field("gamma_mass", &self.gamma_mass)
            .finish_non_exhaustive()
    }
}

impl<T: Real> RadialProfile<T> {
    pub fn new(g: impl Fn(T) -> T + Send + Sync + 'static, cap: T, gamma_mass: T) -> Result<Self, InvariantError> {
        if !(cap > T::zero()) || !cap.is_finite() {
            return Err(InvariantError::Input(format!(
                "density cap must be positive, got {cap}"
            )));
        }
        if !(gamma_mass >= T::zero()) || !gamma_mass.is_finite() {
            return Err(InvariantError::Input(format!(
                "mass must be non-negative, got {gamma_mass}"
            )));
        }
        Ok(RadialProfile {
            g: Arc::new(g),
            cap,
            gamma_mass,
        })
    }

    pub fn radius(&self) -> T {
        (self.gamma_mass / (T::PI() * self.cap)).sqrt()
    }
}

/// `2πM ∫₀^R s g(s) ds`.
pub fn rearrangement_bound<T: Real>(prof: &RadialProfile<T>) -> Result<T, InvariantError> {
    let r = prof.radius();
    if r == T::zero() {
        return Ok(T::zero());
    }
    let mut pts = vec![T::zero()];
    let mut s = r * T::lit(1e-8);
    while s < r {
        pts.push(s);
        s *= T::lit(8.0);
    }
    pts.push(r);
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    let g = &prof.g;
    let q = integrate(
        |s: T| if s == T::zero() { T::zero() } else { s * g(s) },
        &pts,
        QuadOptions::relative(tol),
    )?;
    Ok(T::TAU() * prof.cap * q.value)
}

/// Uniform grid of `grid_n²` cells on `[-w, w]²` around the evaluation point.
/// Cell centres avoid the origin for even `grid_n`.
#[derive(Debug, Clone)]
pub struct RearrangementGrid<T> {
    pub cell_area: T,
    /// `g(|c_k|)` per cell, sorted in non-increasing order.
    pub weights: Vec<T>,
    pub cap: T,
    pub mass: T,
}

impl<T: Real> RearrangementGrid<T> {
    pub fn new(prof: &RadialProfile<T>, grid_n: usize, half_width: T) -> Result<Self, InvariantError> {
        if grid_n < 32 {
            return Err(InvariantError::Input(format!(
                "grid_n must be at least 32, got {grid_n}"
            )));
        }
        let h = T::two() * half_width / T::from_usize_lossy(grid_n);
        let area = h * h;
        let capacity = prof.cap * area * T::from_usize_lossy(grid_n * grid_n);
        if prof.gamma_mass > capacity {
            return Err(InvariantError::Input(format!(
                "mass {} exceeds cap times domain area {capacity}",
                prof.gamma_mass
            )));
        }
        let mut cells: Vec<(T, T)> = Vec::with_capacity(grid_n * grid_n);
        for i in 0..grid_n {
            for j in 0..grid_n {
                let cz = -half_width + h * (T::from_usize_lossy(i) + T::half());
                let cr = -half_width + h * (T::from_usize_lossy(j) + T::half());
                let d = cz.hypot(cr);
                cells.push((d, (prof.g)(d)));
            }
        }
        // Nearest-first order; stable so ties keep grid order.
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        Ok(RearrangementGrid {
            cell_area: area,
            weights: cells.into_iter().map(|c| c.1).collect(),
            cap: prof.cap,
            mass: prof.gamma_mass,
        })
    }

    pub fn score(&self, f: &[T]) -> T {
        let mut acc = CompensatedSum::new();
        for (w, fk) in self.weights.iter().zip(f) {
            acc.add(*w * *fk);
        }
        acc.value() * self.cell_area
    }

    /// Fills cells nearest-first at the cap; the last cell takes the remainder.
    pub fn greedy(&self) -> Vec<T> {
        let mut f = vec![T::zero(); self.weights.len()];
        let mut left = self.mass / self.cell_area;
        for fk in f.iter_mut() {
            if left <= T::zero() {
                break;
            }
            let take = left.min(self.cap);
            *fk = take;
            left -= take;
        }
        f
    }

    /// A random admissible density: cells visited in random order, each filled to
    /// a random level until the mass is placed.
    pub fn random_density<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let n = self.weights.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut f = vec![T::zero(); n];
        let mut left = self.mass / self.cell_area;
        for pass in 0..2 {
            for &k in &order {
                if left <= T::zero() {
                    return f;
                }
                let level = if pass == 0 {
                    T::lit(rng.gen::<f64>()) * self.cap
                } else {
                    self.cap
                };
                let add = (level - f[k]).max(T::zero()).min(left);
                f[k] += add;
                left -= add;
            }
        }
        f
    }

    /// Improving mass transfers between random cell pairs, starting from `f`.
    pub fn local_search<R: Rng + ?Sized>(&self, mut f: Vec<T>, iters: usize, rng: &mut R) -> Vec<T> {
        let n = self.weights.len();
        for _ in 0..iters {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            let (hi, lo) = if self.weights[a] >= self.weights[b] {
                (a, b)
            } else {
                (b, a)
            };
            if self.weights[hi] == self.weights[lo] {
                continue;
            }
            let moved = f[lo].min(self.cap - f[hi]);
            if moved > T::zero() {
                f[lo] -= moved;
                f[hi] += moved;
            }
        }
        f
    }
}

/// Discrete maximum of `Σ g(|c_k|) f_k A` over `0 ≤ f_k ≤ M`, `Σ f_k A = mass`,
/// on a grid of half-width `1.25 R` (or `half_width` when given).
pub fn rearrangement_bruteforce<T: Real>(
    prof: &RadialProfile<T>,
    grid_n: usize,
    half_width: Option<T>,
) -> Result<T, InvariantError> {
    let w = half_width.unwrap_or_else(|| prof.radius() * T::lit(1.25));
    if !(w > T::zero()) {
        if prof.gamma_mass == T::zero() {
            return Ok(T::zero());
        }
        return Err(InvariantError::Input(format!(
            "grid half-width must be positive, got {w}"
        )));
    }
    let grid = RearrangementGrid::new(prof, grid_n, w)?;
    Ok(grid.score(&grid.greedy()))
}
