//! Axisymmetric Biot–Savart kernels on the meridian half-plane.
//!
//! The Green function of `div(x_r⁻¹ ∇Ψ) = x_r ω` with `Ψ = 0` on the axis is
//!
//! ```text
//! G(x, y) = -(1/2π) √(x_r y_r) F(|x-y|² / (x_r y_r)),
//! F(s)    = ∫₀^{π/2} cos 2θ / √(sin²θ + s/4) dθ,
//! ```
//!
//! and the velocity is `u = x_r⁻¹ ∇⊥Ψ`. Two interchangeable evaluations of `F`
//! are provided: adaptive quadrature (reference) and the complete elliptic
//! integral form `F = ((2-m)K(m) - 2E(m))/√m`, `m = 4/(4+s)` (fast path).
//!
//! Regularization replaces `|x-y|²` by `|x-y|² + δ²` everywhere, including the
//! logarithmic part of the decomposition `G = (√(x_r y_r)/2π) ln|x-y| + S`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elliptic::ellip_ke_complement;
use crate::geom::{HalfPlanePoint, Vec2};
use crate::quadrature::{integrate, QuadOptions, QuadratureError};
use crate::scalar::Real;
use crate::summation::{CompensatedSum, CompensatedSum2};

/// `lim_{s→0} F(s) + ½ ln s`, measured with the quadrature backend at
/// `s = 1e-10` (relative tolerance 1e-13). The `O(s ln s)` remainder at that
/// point is below [`SMALL_S_LIMIT_TOL`].
pub const SMALL_S_LIMIT: f64 = 0.079_441_542;
pub const SMALL_S_LIMIT_TOL: f64 = 1e-8;

/// Empirical constant for `|F(s) + ½ ln s| ≤ C₀` on `[1e-8, 16]`; the supremum
/// is attained at the right end of the range.
pub const LOG_REMAINDER_C0: f64 = 1.407;

/// Below this parameter `m = 4/(4+s)` the hypergeometric series is used instead of
/// the AGM closed form, which cancels catastrophically for large `s`.
const SERIES_M_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMethod {
    AdaptiveQuadrature,
    #[default]
    EllipticIntegral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEvalConfig<T> {
    pub quad_rel_tol: T,
    pub delta: T,
    pub method: KernelMethod,
}

impl<T: Real> KernelEvalConfig<T> {
    pub fn new(quad_rel_tol: T, delta: T, method: KernelMethod) -> Result<Self, KernelError> {
        if !(quad_rel_tol > T::zero() && quad_rel_tol <= T::lit(1e-4)) {
            return Err(KernelError::Config(format!(
                "quad_rel_tol must lie in (0, 1e-4], got {quad_rel_tol}"
            )));
        }
        if !(delta >= T::zero()) || !delta.is_finite() {
            return Err(KernelError::Config(format!(
                "delta must be finite and non-negative, got {delta}"
            )));
        }
        Ok(KernelEvalConfig {
            quad_rel_tol,
            delta,
            method,
        })
    }

    /// Exact singular kernel, elliptic backend.
    pub fn exact() -> Self {
        KernelEvalConfig {
            quad_rel_tol: default_tol::<T>(),
            delta: T::zero(),
            method: KernelMethod::EllipticIntegral,
        }
    }

    /// Exact singular kernel, quadrature backend.
    pub fn reference() -> Self {
        KernelEvalConfig {
            method: KernelMethod::AdaptiveQuadrature,
            ..Self::exact()
        }
    }

    pub fn with_delta(mut self, delta: T) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_method(mut self, method: KernelMethod) -> Self {
        self.method = method;
        self
    }
}

fn default_tol<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(64.0))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("kernel singular: evaluation point coincides with a source at ({z}, {r}) and delta = 0")]
    Singular { z: f64, r: f64 },
    #[error("kernel evaluation failed: {0}")]
    Evaluation(#[from] QuadratureError),
    #[error("invalid kernel configuration: {0}")]
    Config(String),
}

/// A weighted vortex particle. `weight` is an element of `∫ x_r ω dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VortexParticle<T: Copy> {
    pub pos: HalfPlanePoint<T>,
    pub weight: T,
    pub blob_id: usize,
}

impl<T: Real> VortexParticle<T> {
    pub fn new(pos: HalfPlanePoint<T>, weight: T, blob_id: usize) -> Self {
        VortexParticle { pos, weight, blob_id }
    }
}

// ---------------------------------------------------------------------------
// F(s)

fn check_s<T: Real>(s: T) -> Result<(), KernelError> {
    if s > T::zero() && s.is_finite() {
        Ok(())
    } else {
        Err(KernelError::Domain(format!("F(s) requires s > 0, got {s}")))
    }
}

/// `F(s)`.
pub fn f_kernel<T: Real>(s: T, cfg: &KernelEvalConfig<T>) -> Result<T, KernelError> {
    check_s(s)?;
    match cfg.method {
        KernelMethod::EllipticIntegral => Ok(f_and_deriv_elliptic(s).0),
        KernelMethod::AdaptiveQuadrature => f_quadrature(s, cfg.quad_rel_tol),
    }
}

/// `F'(s)`.
pub fn f_kernel_deriv<T: Real>(s: T, cfg: &KernelEvalConfig<T>) -> Result<T, KernelError> {
    check_s(s)?;
    match cfg.method {
        KernelMethod::EllipticIntegral => Ok(f_and_deriv_elliptic(s).1),
        KernelMethod::AdaptiveQuadrature => f_deriv_quadrature(s, cfg.quad_rel_tol),
    }
}

/// `(F(s), F'(s))` with one backend call where possible.
pub fn f_and_deriv<T: Real>(s: T, cfg: &KernelEvalConfig<T>) -> Result<(T, T), KernelError> {
    check_s(s)?;
    match cfg.method {
        KernelMethod::EllipticIntegral => Ok(f_and_deriv_elliptic(s)),
        KernelMethod::AdaptiveQuadrature => Ok((
            f_quadrature(s, cfg.quad_rel_tol)?,
            f_deriv_quadrature(s, cfg.quad_rel_tol)?,
        )),
    }
}

/// `F''(s)` by quadrature of `(15/64) ∫ sin²2θ/4 · (sin²θ + s/4)^{-7/2} dθ`.
/// Only used for diagnostics.
pub fn f_kernel_second_deriv<T: Real>(s: T, rel_tol: T) -> Result<T, KernelError> {
    check_s(s)?;
    let a2 = s / T::lit(4.0);
    let q = integrate(
        |t: T| {
            let s2 = (T::two() * t).sin();
            let d = t.sin().sq() + a2;
            s2 * s2 / T::lit(4.0) / (d * d * d * d.sqrt())
        },
        &theta_breakpoints(s),
        QuadOptions::relative(rel_tol),
    )?;
    Ok(T::lit(15.0 / 64.0) * q.value)
}

/// Elliptic-integral evaluation of `(F(s), F'(s))`, `s > 0`.
///
/// Uses `k = 2/√(4+s)`, `m = k²`, `k'² = s/(4+s)`:
/// `F = ((2-m)K - 2E)/k` and `F' = -(k/8)((2-m)E/k'² - 2K)`.
/// For `m ≤ 1/2` the series `F = (π/2)√m Σ_{j≥1} c_j j/(j+1) m^j`,
/// `c_j = ((1/2)_j / j!)²`, replaces the closed form.
#[inline]
pub fn f_and_deriv_elliptic<T: Real>(s: T) -> (T, T) {
    let four = T::lit(4.0);
    let denom = four + s;
    let m = four / denom;
    if m <= T::lit(SERIES_M_MAX) {
        return f_and_deriv_series(m);
    }
    let mc = s / denom;
    let k = m.sqrt();
    let (kk, ee) = ellip_ke_complement(mc);
    let two_minus_m = T::two() - m;
    let f = (two_minus_m * kk - T::two() * ee) / k;
    let fp = -(k / T::lit(8.0)) * (two_minus_m * ee / mc - T::two() * kk);
    (f, fp)
}

fn f_and_deriv_series<T: Real>(m: T) -> (T, T) {
    // F(m)   = (π/2) Σ_{j≥1} a_j m^{j+1/2},  a_j = c_j j/(j+1)
    // dF/dm  = (π/2) Σ_{j≥1} a_j (j+1/2) m^{j-1/2};  dm/ds = -m²/4
    let mut c = T::one();
    let mut mj = T::one();
    let mut f = T::zero();
    let mut df = T::zero();
    for j in 1..200 {
        let jf = T::from_usize_lossy(j);
        let ratio = (T::two() * jf - T::one()) / (T::two() * jf);
        c = c * ratio * ratio;
        mj *= m;
        let a = c * jf / (jf + T::one());
        let term = a * mj;
        f += term;
        df += term * (jf + T::half());
        if term <= T::epsilon() * f * T::lit(0.01) {
            break;
        }
    }
    let sm = m.sqrt();
    let f_val = T::FRAC_PI_2() * sm * f;
    let dfdm = T::FRAC_PI_2() * df / sm;
    (f_val, -dfdm * m * m / T::lit(4.0))
}

/// Breakpoints on `[0, π/2]` geometrically clustered at the `θ ~ √s/2` peak.
fn theta_breakpoints<T: Real>(s: T) -> Vec<T> {
    let end = T::FRAC_PI_2();
    let mut pts = vec![T::zero()];
    let mut t = s.sqrt() * T::half() * T::lit(0.25);
    while t < end * T::half() {
        pts.push(t);
        t *= T::lit(4.0);
    }
    pts.push(end);
    pts
}

/// Quadrature of the defining integral for `s ≤ 1`; for `s > 1` the
/// integrated-by-parts form `∫ (sin²2θ/4)(sin²θ + s/4)^{-3/2} dθ`, whose
/// integrand is positive and free of the large-`s` cancellation.
fn f_quadrature<T: Real>(s: T, rel_tol: T) -> Result<T, KernelError> {
    let a2 = s / T::lit(4.0);
    let pts = theta_breakpoints(s);
    let opts = QuadOptions::relative(rel_tol);
    let q = if s <= T::one() {
        integrate(|t: T| (T::two() * t).cos() / (t.sin().sq() + a2).sqrt(), &pts, opts)?
    } else {
        integrate(
            |t: T| {
                let s2 = (T::two() * t).sin();
                let d = t.sin().sq() + a2;
                s2 * s2 / T::lit(4.0) / (d * d.sqrt())
            },
            &pts,
            opts,
        )?
    };
    Ok(q.value)
}

/// `F'(s) = -(1/8) ∫ cos2θ (sin²θ + s/4)^{-3/2} dθ` for `s ≤ 1`, and the
/// by-parts form `-(3/8) ∫ (sin²2θ/4)(sin²θ + s/4)^{-5/2} dθ` above.
fn f_deriv_quadrature<T: Real>(s: T, rel_tol: T) -> Result<T, KernelError> {
    let a2 = s / T::lit(4.0);
    let pts = theta_breakpoints(s);
    let opts = QuadOptions::relative(rel_tol);
    if s <= T::one() {
        let q = integrate(
            |t: T| {
                let d = t.sin().sq() + a2;
                (T::two() * t).cos() / (d * d.sqrt())
            },
            &pts,
            opts,
        )?;
        Ok(-q.value / T::lit(8.0))
    } else {
        let q = integrate(
            |t: T| {
                let s2 = (T::two() * t).sin();
                let d = t.sin().sq() + a2;
                s2 * s2 / T::lit(4.0) / (d * d * d.sqrt())
            },
            &pts,
            opts,
        )?;
        Ok(-T::lit(3.0 / 8.0) * q.value)
    }
}

// ---------------------------------------------------------------------------
// Green function and its split

fn check_point<T: Real>(x: HalfPlanePoint<T>, what: &str) -> Result<(), KernelError> {
    if x.r > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(KernelError::Domain(format!(
            "{what} must lie in the open half-plane, got ({}, {})",
            x.z, x.r
        )))
    }
}

/// Regularized squared distance; errors on coincidence with `delta = 0`.
fn reg_dist2<T: Real>(x: HalfPlanePoint<T>, y: HalfPlanePoint<T>, delta: T) -> Result<T, KernelError> {
    let d2 = (x - y).norm_sq() + delta * delta;
    if d2 > T::zero() {
        Ok(d2)
    } else {
        Err(KernelError::Singular {
            z: y.z.to_f64_lossy(),
            r: y.r.to_f64_lossy(),
        })
    }
}

/// `G(x, y)`.
pub fn green<T: Real>(x: HalfPlanePoint<T>, y: HalfPlanePoint<T>, cfg: &KernelEvalConfig<T>) -> Result<T, KernelError> {
    check_point(x, "x")?;
    check_point(y, "y")?;
    let d2 = reg_dist2(x, y, cfg.delta)?;
    let p = (x.r * y.r).sqrt();
    let f = f_kernel(d2 / (x.r * y.r), cfg)?;
    Ok(-p * f / T::TAU())
}

/// Regular part `S(x, y) = G(x, y) - (√(x_r y_r)/2π) ln|x - y|`.
pub fn green_remainder<T: Real>(
    x: HalfPlanePoint<T>,
    y: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<T, KernelError> {
    check_point(x, "x")?;
    check_point(y, "y")?;
    let d2 = reg_dist2(x, y, cfg.delta)?;
    let prod = x.r * y.r;
    let s = d2 / prod;
    let f = f_kernel(s, cfg)?;
    // F + ln|x-y| = (F + ½ ln s) + ½ ln(x_r y_r)
    let inner = (f + T::half() * s.ln()) + T::half() * prod.ln();
    Ok(-prod.sqrt() * inner / T::TAU())
}

/// Value and `x`-gradient of the (regularized) Green function, plus the
/// analytic gradient of its logarithmic part.
#[derive(Debug, Clone, Copy)]
struct PairTerms<T: Copy> {
    /// `∇_x G`
    grad_g: Vec2<T>,
    /// `√(x_r y_r)/2π · (x-y)/ρ²`, the gradient of the log part without its `e_r` piece.
    grad_log_k: Vec2<T>,
    /// `√(x_r y_r)/2π · ln ρ`
    log_part: T,
    /// `∇_x (G - log part)`, evaluated term by term.
    grad_s: Vec2<T>,
}

fn pair_terms<T: Real>(
    x: HalfPlanePoint<T>,
    y: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<PairTerms<T>, KernelError> {
    let d2 = reg_dist2(x, y, cfg.delta)?;
    let prod = x.r * y.r;
    let s = d2 / prod;
    let (f, fp) = f_and_deriv(s, cfg)?;
    let p = prod.sqrt();
    let tau = T::TAU();
    let diff = x - y;
    let grad_s = Vec2::new(T::two() * diff.z / prod, T::two() * diff.r / prod - s / x.r);
    let half_dr = p / (T::two() * x.r);
    // ∇G = -(1/2π)[ (p/2x_r) F e_r + p F' ∇s ]
    let grad_g = Vec2::new(-p * fp * grad_s.z, -(half_dr * f + p * fp * grad_s.r)) / tau;
    let ln_rho = T::half() * d2.ln();
    let grad_log_k = diff * (p / (tau * d2));
    let log_part = p * ln_rho / tau;
    // ∇S = -(1/2π)[ (p/2x_r)(F + ln ρ) e_r + p (F'∇s + (x-y)/ρ²) ]
    let f_plus_log = (f + T::half() * s.ln()) + T::half() * prod.ln();
    let sing = grad_s * fp + diff / d2;
    let grad_rem = Vec2::new(-p * sing.z, -(half_dr * f_plus_log + p * sing.r)) / tau;
    Ok(PairTerms {
        grad_g,
        grad_log_k,
        log_part,
        grad_s: grad_rem,
    })
}

/// `x_r⁻¹ ∇⊥_x G(x, y)` with the elliptic backend, for hot loops.
/// Caller guarantees `x_r, y_r > 0` and `|x-y|² + δ² > 0`.
#[inline]
pub fn unit_velocity_fast<T: Real>(x: HalfPlanePoint<T>, y: HalfPlanePoint<T>, delta2: T) -> Vec2<T> {
    let diff = x - y;
    let d2 = diff.norm_sq() + delta2;
    let prod = x.r * y.r;
    let s = d2 / prod;
    let (f, fp) = f_and_deriv_elliptic(s);
    let p = prod.sqrt();
    let gs_z = T::two() * diff.z / prod;
    let gs_r = T::two() * diff.r / prod - s / x.r;
    let inv = T::one() / (T::TAU() * x.r);
    // ∇⊥G = (-∂_r G, ∂_z G)
    let dz_g = -p * fp * gs_z;
    let dr_g = -(p / (T::two() * x.r) * f + p * fp * gs_r);
    Vec2::new(-dr_g * inv, dz_g * inv)
}

/// Stream function `Ψ(x) = Σ_k G(x, y_k) w_k`.
pub fn stream_function<T: Real>(
    particles: &[VortexParticle<T>],
    x: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<T, KernelError> {
    let mut acc = CompensatedSum::new();
    for p in particles {
        acc.add(green(x, p.pos, cfg)? * p.weight);
    }
    Ok(acc.value())
}

/// Singular part `ψ(x) = Σ_k (√(x_r y_r)/2π) ln|x - y_k| w_k`.
pub fn psi_singular<T: Real>(
    particles: &[VortexParticle<T>],
    x: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<T, KernelError> {
    check_point(x, "x")?;
    let mut acc = CompensatedSum::new();
    for p in particles {
        check_point(p.pos, "source")?;
        let d2 = reg_dist2(x, p.pos, cfg.delta)?;
        acc.add((x.r * p.pos.r).sqrt() * T::half() * d2.ln() / T::TAU() * p.weight);
    }
    Ok(acc.value())
}

/// `u(x) = x_r⁻¹ ∇⊥Ψ(x)` from the analytic kernel gradient.
pub fn velocity_from_stream<T: Real>(
    particles: &[VortexParticle<T>],
    x: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<Vec2<T>, KernelError> {
    check_point(x, "x")?;
    let mut acc = CompensatedSum2::new();
    for p in particles {
        check_point(p.pos, "source")?;
        let t = pair_terms(x, p.pos, cfg)?;
        acc.add(t.grad_g.perp() * p.weight);
    }
    Ok(acc.value() / x.r)
}

/// The three-way split `u = u_K + u_L + u_R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityParts<T: Copy> {
    /// Planar Biot–Savart part.
    pub k: Vec2<T>,
    /// Local induction part, `-(2x_r²)⁻¹ ψ(x) e_z`.
    pub l: Vec2<T>,
    /// Regular remainder, `x_r⁻¹ Σ ∇⊥S w`.
    pub r: Vec2<T>,
}

impl<T: Real> VelocityParts<T> {
    pub fn total(&self) -> Vec2<T> {
        self.k + self.l + self.r
    }
}

/// `u_K`, `u_L`, `u_R`. With `delta > 0` the coincident term of `u_K` vanishes
/// (`K(0) := 0`) while `u_L` and `u_R` keep every particle.
pub fn velocity_decomposed<T: Real>(
    particles: &[VortexParticle<T>],
    x: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<VelocityParts<T>, KernelError> {
    check_point(x, "x")?;
    let mut k = CompensatedSum2::new();
    let mut psi = CompensatedSum::new();
    let mut rem = CompensatedSum2::new();
    for p in particles {
        check_point(p.pos, "source")?;
        let t = pair_terms(x, p.pos, cfg)?;
        k.add(t.grad_log_k.perp() * p.weight);
        psi.add(t.log_part * p.weight);
        rem.add(t.grad_s.perp() * p.weight);
    }
    let xr = x.r;
    Ok(VelocityParts {
        k: k.value() / xr,
        l: Vec2::e_z() * (-psi.value() / (T::two() * xr * xr)),
        r: rem.value() / xr,
    })
}

/// Velocity by direct evaluation of the cylindrical-coordinate Biot–Savart law
///
/// ```text
/// u_z = -(1/4π) Σ w y_r ∫_{-π}^{π} (x_r cosθ - y_r) D^{-3/2} dθ
/// u_r =  (1/4π) Σ w y_r ∫_{-π}^{π} (x_z - y_z) cosθ D^{-3/2} dθ
/// D   = |x-y|² + δ² + 2 x_r y_r (1 - cosθ)
/// ```
///
/// (the `cosθ` in `u_r` is present). Independent of [`velocity_from_stream`].
pub fn velocity_3d_formula<T: Real>(
    particles: &[VortexParticle<T>],
    x: HalfPlanePoint<T>,
    cfg: &KernelEvalConfig<T>,
) -> Result<Vec2<T>, KernelError> {
    check_point(x, "x")?;
    let mut acc = CompensatedSum2::new();
    let pi = T::PI();
    for p in particles {
        let y = p.pos;
        check_point(y, "source")?;
        let d2 = reg_dist2(x, y, cfg.delta)?;
        let two_xy = T::two() * x.r * y.r;
        let dz = x.z - y.z;
        let denom = |t: T| {
            let h = (t * T::half()).sin();
            let d = d2 + T::two() * two_xy * h * h;
            d * d.sqrt()
        };
        // ∫_0^π (A - B cosθ)^{-3/2} dθ = 2E(k)/((A-B)√(A+B)), k² = 2B/(A+B)
        let a_plus_b = d2 + T::two() * two_xy;
        let (_, e) = ellip_ke_complement(d2 / a_plus_b);
        let scale = (x.r + y.r + dz.abs()) * T::two() * e / (d2 * a_plus_b.sqrt());
        let opts = QuadOptions {
            rel_tol: cfg.quad_rel_tol,
            abs_tol: cfg.quad_rel_tol * scale,
            max_intervals: 4000,
        };
        let mut pts = vec![T::zero()];
        let mut t = (d2 / (x.r * y.r)).sqrt() * T::lit(0.25);
        while t < pi * T::half() {
            pts.push(t);
            t *= T::lit(4.0);
        }
        pts.push(pi);
        // Both integrands are even in θ.
        let iz = integrate(|t: T| (x.r * t.cos() - y.r) / denom(t), &pts, opts)?.value;
        let ir = if dz == T::zero() {
            T::zero()
        } else {
            integrate(|t: T| t.cos() / denom(t), &pts, opts)?.value * dz
        };
        let c = p.weight * y.r * T::two() / (T::lit(4.0) * pi);
        acc.add(Vec2::new(-c * iz, c * ir));
    }
    Ok(acc.value())
}

// ---------------------------------------------------------------------------
// Measured constants

/// Measured suprema over a log-spaced grid of `s ∈ [s_min, s_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelBoundSweep {
    pub sup_log_remainder: f64,
    pub sup_deriv_remainder_weighted: f64,
    pub sup_deriv_remainder_literal: f64,
    pub sup_s2_second_deriv: f64,
    pub samples: usize,
}

/// Sweeps `|F + ½ln s|`, `|F' + 1/(2s)|/(1+|ln s|)`, the literal
/// `|F' + 1/(2s)|/|ln s|` (unbounded near `s = 1`), and `|s² F''|`.
pub fn kernel_bound_sweep(s_min: f64, s_max: f64, samples: usize) -> Result<KernelBoundSweep, KernelError> {
    let cfg = KernelEvalConfig::<f64>::exact();
    let mut out = KernelBoundSweep {
        sup_log_remainder: 0.0,
        sup_deriv_remainder_weighted: 0.0,
        sup_deriv_remainder_literal: 0.0,
        sup_s2_second_deriv: 0.0,
        samples,
    };
    let (l0, l1) = (s_min.ln(), s_max.ln());
    for i in 0..samples {
        let s = (l0 + (l1 - l0) * i as f64 / (samples - 1) as f64).exp();
        let (f, fp) = f_and_deriv(s, &cfg)?;
        let fpp = f_kernel_second_deriv(s, 1e-10)?;
        let lg = s.ln();
        out.sup_log_remainder = out.sup_log_remainder.max((f + 0.5 * lg).abs());
        let dr = (fp + 0.5 / s).abs();
        out.sup_deriv_remainder_weighted = out.sup_deriv_remainder_weighted.max(dr / (1.0 + lg.abs()));
        if lg != 0.0 {
            out.sup_deriv_remainder_literal = out.sup_deriv_remainder_literal.max(dr / lg.abs());
        }
        out.sup_s2_second_deriv = out.sup_s2_second_deriv.max((s * s * fpp).abs());
    }
    Ok(out)
}

/// Measured `C* = sup |x - y| · |x_r⁻¹ ∇_x G(x, y)|` over pairs of a grid on the
/// box `[z_c - h, z_c + h] × [r_min, r_max]`.
pub fn kernel_gradient_bound(z_center: f64, half_height: f64, r_min: f64, r_max: f64, n: usize) -> f64 {
    let cfg = KernelEvalConfig::<f64>::exact();
    let pts: Vec<Vec2<f64>> = (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| {
                let fz = i as f64 / (n - 1) as f64;
                let fr = j as f64 / (n - 1) as f64;
                Vec2::new(
                    z_center - half_height + 2.0 * half_height * fz,
                    r_min + (r_max - r_min) * fr,
                )
            })
        })
        .collect();
    let mut sup = 0.0_f64;
    for (a, &x) in pts.iter().enumerate() {
        for &y in &pts[a + 1..] {
            for (p, q) in [(x, y), (y, x)] {
                if let Ok(t) = pair_terms(p, q, &cfg) {
                    sup = sup.max((p - q).norm() * t.grad_g.norm() / p.r);
                }
            }
        }
    }
    sup
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> KernelEvalConfig<f64> {
        KernelEvalConfig::reference()
    }
    fn e() -> KernelEvalConfig<f64> {
        KernelEvalConfig::exact()
    }

    #[test]
    fn config_validation() {
        assert!(KernelEvalConfig::new(1e-3, 0.0, KernelMethod::EllipticIntegral).is_err());
        assert!(KernelEvalConfig::new(0.0, 0.0, KernelMethod::EllipticIntegral).is_err());
        assert!(KernelEvalConfig::new(1e-8, -1.0, KernelMethod::EllipticIntegral).is_err());
        assert!(KernelEvalConfig::new(1e-8, 0.1, KernelMethod::AdaptiveQuadrature).is_ok());
    }

    #[test]
    fn f_domain_errors() {
        assert!(matches!(f_kernel(0.0, &e()), Err(KernelError::Domain(_))));
        assert!(matches!(f_kernel(-1.0, &q()), Err(KernelError::Domain(_))));
        assert!(matches!(f_kernel_deriv(f64::NAN, &e()), Err(KernelError::Domain(_))));
    }

    #[test]
    fn f_large_s_vanishes() {
        for cfg in [q(), e()] {
            assert!(f_kernel(1e6, &cfg).unwrap().abs() < 1e-8);
            assert!(f_kernel_deriv(1e6, &cfg).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn f_small_s_limit_constant() {
        let s = 1e-10;
        let v = f_kernel(s, &q()).unwrap() + 0.5 * s.ln();
        assert!((v - SMALL_S_LIMIT).abs() < SMALL_S_LIMIT_TOL, "{v}");
        // The measured constant agrees with the leading term of K(m) ~ ln(4/k').
        assert!((v - (8.0_f64.ln() - 2.0)).abs() < 1e-4);
    }

    #[test]
    fn f_at_one_matches_tight_reference() {
        let tight = KernelEvalConfig::new(1e-13, 0.0, KernelMethod::AdaptiveQuadrature).unwrap();
        let reference = f_kernel(1.0, &tight).unwrap();
        assert!((f_kernel(1.0, &e()).unwrap() - reference).abs() < 1e-9);
        assert!((reference - 0.393_175_148_372_004_7).abs() < 1e-12);
    }

    #[test]
    fn quadrature_forms_agree_across_switch() {
        // Defining integrand vs. integrated-by-parts integrand.
        for &s in &[0.3_f64, 1.0, 3.0] {
            let a2 = s / 4.0;
            let pts = theta_breakpoints(s);
            let opts = QuadOptions::relative(1e-13);
            let def = integrate(|t: f64| (2.0 * t).cos() / (t.sin().powi(2) + a2).sqrt(), &pts, opts).unwrap();
            let parts = integrate(
                |t: f64| (2.0 * t).sin().powi(2) / 4.0 / (t.sin().powi(2) + a2).powf(1.5),
                &pts,
                opts,
            )
            .unwrap();
            assert!((def.value - parts.value).abs() < 1e-12 * def.value.abs().max(1e-3));
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for &s in &[1e-8_f64, 1e-3, 0.5, 2.0, 9.0, 20.0, 300.0] {
            let h = f64::EPSILON.sqrt() * s;
            let fd = (f_kernel(s + h, &e()).unwrap() - f_kernel(s - h, &e()).unwrap()) / (2.0 * h);
            let an = f_kernel_deriv(s, &e()).unwrap();
            assert!((fd - an).abs() <= 1e-6 * an.abs(), "s={s} fd={fd} an={an}");
        }
        let s = 1e-8;
        let fp = f_kernel_deriv(s, &e()).unwrap();
        assert!(((fp + 0.5 / s) / (0.5 / s)).abs() < 1e-3);
    }

    #[test]
    fn derivative_negative_on_unit_interval() {
        for i in 0..50 {
            let s = 10f64.powf(-8.0 + 8.0 * i as f64 / 49.0);
            assert!(f_kernel_deriv(s, &e()).unwrap() < 0.0);
            assert!(f_kernel_deriv(s, &q()).unwrap() < 0.0);
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        for &s in &[1e-4_f64, 0.5, 5.0] {
            let h = 1e-5 * s;
            let fd = (f_kernel_deriv(s + h, &e()).unwrap() - f_kernel_deriv(s - h, &e()).unwrap()) / (2.0 * h);
            let an = f_kernel_second_deriv(s, 1e-12).unwrap();
            assert!((fd - an).abs() < 1e-6 * an.abs(), "s={s} fd={fd} an={an}");
        }
    }

    #[test]
    fn green_symmetric_and_errors() {
        let x = Vec2::new(0.0, 1.0);
        let y = Vec2::new(0.3, 1.4);
        assert!((green(x, y, &e()).unwrap() - green(y, x, &e()).unwrap()).abs() < 1e-14);
        assert!(matches!(green(x, x, &e()), Err(KernelError::Singular { .. })));
        assert!(matches!(
            green(Vec2::new(0.0, 0.0), y, &e()),
            Err(KernelError::Domain(_))
        ));
        // Regularized coincident value equals green at distance delta.
        let d = 0.01;
        let reg = green(x, x, &e().with_delta(d)).unwrap();
        let plain = green(x, Vec2::new(d, 1.0), &e()).unwrap();
        assert!((reg - plain).abs() < 1e-14);
    }

    #[test]
    fn green_near_pair_against_quadrature() {
        let x = Vec2::new(0.0, 1.0);
        let y = Vec2::new(0.1, 1.0);
        let gq = green(x, y, &q()).unwrap();
        let ge = green(x, y, &e()).unwrap();
        assert!((gq - ge).abs() < 1e-11);
        // Leading logarithm plus the small-s constant.
        let approx = (0.1_f64.ln() - (8.0_f64.ln() - 2.0)) / std::f64::consts::TAU;
        assert!((ge - approx).abs() < 0.01);
    }

    #[test]
    fn remainder_converges_on_diagonal() {
        let x = Vec2::new(0.0, 1.0);
        let t = 1e-6;
        let a = green_remainder(x, Vec2::new(t, 1.0), &e()).unwrap();
        let b = green_remainder(x, Vec2::new(t / 2.0, 1.0), &e()).unwrap();
        assert!((a - b).abs() < 1e-3);
        let limit = -(SMALL_S_LIMIT) / std::f64::consts::TAU;
        assert!((a - limit).abs() < 1e-4);
        let y = Vec2::new(0.4, 1.7);
        let z = Vec2::new(-0.2, 0.6);
        assert!((green_remainder(y, z, &e()).unwrap() - green_remainder(z, y, &e()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn stream_function_basics() {
        let cfg = e();
        let x = Vec2::new(0.5, 1.0);
        assert_eq!(stream_function::<f64>(&[], x, &cfg).unwrap(), 0.0);
        let ps = vec![VortexParticle::new(Vec2::new(0.0, 1.0), 1.0, 0)];
        assert_eq!(
            stream_function(&ps, x, &cfg).unwrap(),
            green(x, Vec2::new(0.0, 1.0), &cfg).unwrap()
        );
        let doubled: Vec<_> = ps
            .iter()
            .map(|p| VortexParticle {
                weight: 2.0 * p.weight,
                ..*p
            })
            .collect();
        assert_eq!(
            stream_function(&doubled, x, &cfg).unwrap(),
            2.0 * stream_function(&ps, x, &cfg).unwrap()
        );
        assert!(matches!(
            stream_function(&ps, Vec2::new(0.0, 1.0), &cfg),
            Err(KernelError::Singular { .. })
        ));
    }

    #[test]
    fn psi_singular_single_particle_and_sign() {
        let cfg = e();
        let gamma = 2.0;
        let x = Vec2::new(0.0, 1.0);
        let eps = 1e-3;
        let ps = vec![VortexParticle::new(x + Vec2::new(eps, 0.0), gamma, 0)];
        let psi = psi_singular(&ps, x, &cfg).unwrap();
        assert!((psi - gamma * eps.ln() / std::f64::consts::TAU).abs() < 1e-14);

        let blob: Vec<_> = (0..10)
            .map(|i| VortexParticle::new(Vec2::new(0.01 * i as f64, 1.0 + 0.02 * i as f64), 0.3, 0))
            .collect();
        assert!(psi_singular(&blob, Vec2::new(0.05, 1.05), &cfg).unwrap() <= 0.0);
    }

    #[test]
    fn stream_minus_psi_is_remainder_sum() {
        let cfg = e();
        let ps: Vec<_> = (0..7)
            .map(|i| {
                VortexParticle::new(
                    Vec2::new(0.1 * i as f64 - 0.3, 0.8 + 0.07 * i as f64),
                    0.1 + 0.05 * i as f64,
                    0,
                )
            })
            .collect();
        let x = Vec2::new(0.05, 1.13);
        let lhs = stream_function(&ps, x, &cfg).unwrap() - psi_singular(&ps, x, &cfg).unwrap();
        let rhs: f64 = ps
            .iter()
            .map(|p| green_remainder(x, p.pos, &cfg).unwrap() * p.weight)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn velocity_matches_stream_finite_differences() {
        let cfg = e();
        let ps: Vec<_> = (0..5)
            .map(|i| VortexParticle::new(Vec2::new(0.2 * i as f64, 0.9 + 0.1 * i as f64), 1.0 - 0.1 * i as f64, 0))
            .collect();
        let x = Vec2::new(0.33, 1.61);
        let h = 1e-5;
        let psi = |p: Vec2<f64>| stream_function(&ps, p, &cfg).unwrap();
        let dz = (psi(x + Vec2::new(h, 0.0)) - psi(x - Vec2::new(h, 0.0))) / (2.0 * h);
        let dr = (psi(x + Vec2::new(0.0, h)) - psi(x - Vec2::new(0.0, h))) / (2.0 * h);
        let fd = Vec2::new(-dr, dz) / x.r;
        let u = velocity_from_stream(&ps, x, &cfg).unwrap();
        assert!((u - fd).norm() < 1e-6 * u.norm().max(1.0), "{u:?} vs {fd:?}");
    }

    #[test]
    fn velocity_symmetric_configuration() {
        let cfg = e();
        let ps = vec![
            VortexParticle::new(Vec2::new(0.4, 1.0), 1.0, 0),
            VortexParticle::new(Vec2::new(-0.4, 1.0), 1.0, 0),
            VortexParticle::new(Vec2::new(0.2, 1.5), 0.5, 0),
            VortexParticle::new(Vec2::new(-0.2, 1.5), 0.5, 0),
        ];
        let u = velocity_from_stream(&ps, Vec2::new(0.0, 1.2), &cfg).unwrap();
        assert!(u.r.abs() < 1e-10);
    }

    #[test]
    fn decomposition_identity_and_axial_local_part() {
        let cfg = e().with_delta(1e-3);
        let ps: Vec<_> = (0..6)
            .map(|i| VortexParticle::new(Vec2::new(0.01 * i as f64, 1.0 + 0.013 * i as f64), 0.2, 0))
            .collect();
        for x in [Vec2::new(0.02, 1.03), ps[2].pos, Vec2::new(1.0, 0.4)] {
            let parts = velocity_decomposed(&ps, x, &cfg).unwrap();
            assert_eq!(parts.l.r, 0.0);
            let u = velocity_from_stream(&ps, x, &cfg).unwrap();
            assert!((parts.total() - u).norm() <= 1e-9 * u.norm());
        }
    }

    #[test]
    fn single_particle_self_velocity_has_no_planar_part() {
        let cfg = e().with_delta(0.01);
        let ps = vec![VortexParticle::new(Vec2::new(0.0, 1.0), 1.0, 0)];
        let parts = velocity_decomposed(&ps, ps[0].pos, &cfg).unwrap();
        assert_eq!(parts.k, Vec2::zero());
        let u = velocity_from_stream(&ps, ps[0].pos, &cfg).unwrap();
        assert!(u.r.abs() < 1e-15);
        assert!(u.z > 0.0);
        assert!((u - (parts.l + parts.r)).norm() < 1e-12 * u.norm());
    }

    #[test]
    fn fast_unit_velocity_matches_checked_path() {
        let cfg = e().with_delta(0.02);
        let x = Vec2::new(0.1, 1.1);
        for y in [Vec2::new(0.0, 1.0), x, Vec2::new(3.0, 0.2)] {
            let ps = vec![VortexParticle::new(y, 1.0, 0)];
            let a = velocity_from_stream(&ps, x, &cfg).unwrap();
            let b = unit_velocity_fast(x, y, cfg.delta * cfg.delta);
            assert!((a - b).norm() <= 1e-14 * a.norm().max(1e-300), "{a:?} {b:?}");
        }
    }

    #[test]
    fn three_d_formula_on_axis_has_no_radial_velocity() {
        let cfg = KernelEvalConfig::new(1e-10, 0.0, KernelMethod::EllipticIntegral).unwrap();
        let ps = vec![
            VortexParticle::new(Vec2::new(0.3, 1.0), 1.0, 0),
            VortexParticle::new(Vec2::new(-0.1, 0.9), 0.7, 0),
        ];
        let u: Vec2<f64> = velocity_3d_formula(&ps, Vec2::new(0.05, 1e-6), &cfg).unwrap();
        assert!(u.r.abs() < 1e-4, "{u:?}");
    }

    #[test]
    fn three_d_formula_matches_stream_velocity() {
        let cfg = KernelEvalConfig::new(1e-11, 0.0, KernelMethod::EllipticIntegral).unwrap();
        let ps = vec![
            VortexParticle::new(Vec2::new(0.3, 1.0), 1.0, 0),
            VortexParticle::new(Vec2::new(-0.1, 0.9), 0.7, 0),
            VortexParticle::new(Vec2::new(0.0, 1.3), -0.4, 0),
        ];
        for x in [Vec2::new(0.05, 1.2), Vec2::new(1.0, 0.3), Vec2::new(-0.5, 2.0)] {
            let a = velocity_3d_formula(&ps, x, &cfg).unwrap();
            let b = velocity_from_stream(&ps, x, &cfg).unwrap();
            assert!((a - b).norm() < 1e-8 * b.norm(), "{a:?} {b:?}");
        }
        // Regularized kernels agree as well: δ² enters both forms identically.
        let reg = cfg.with_delta(0.05);
        let x = ps[0].pos;
        let a = velocity_3d_formula(&ps, x, &reg).unwrap();
        let b = velocity_from_stream(&ps, x, &reg).unwrap();
        assert!((a - b).norm() < 1e-8 * b.norm());
    }

    #[test]
    fn works_in_single_precision() {
        let cfg = KernelEvalConfig::<f32>::exact();
        let f = f_kernel(1.0_f32, &cfg).unwrap();
        assert!((f - 0.393_175_15).abs() < 1e-5);
        let g = green(Vec2::new(0.0_f32, 1.0), Vec2::new(0.1, 1.0), &cfg).unwrap();
        let g64 = green(Vec2::new(0.0_f64, 1.0), Vec2::new(0.1, 1.0), &e()).unwrap();
        assert!((g as f64 - g64).abs() < 1e-5);
    }
}
