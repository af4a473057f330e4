//! Regularized vortex-blob simulation of the rescaled axisymmetric transport
//! equation, with localization diagnostics.
//!
//! Particles carry constant weights `w_k` (elements of `∫ x_r ω dx`) and move with
//! the total induced velocity divided by `L = |ln ε|`. The kernel is desingularized
//! by `|x - y|² → |x - y|² + δ²`; the self term is kept, since it is finite and its
//! planar part vanishes.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::RingParams;
use crate::geom::Vec2;
use crate::kernel::{f_and_deriv_elliptic, unit_velocity_fast, KernelError, VortexParticle};
use crate::summation::{CompensatedSum, CompensatedSum2};

/// Default density cap `M₀` in `|ω| ≤ M₀/ε²`.
pub const DEFAULT_DENSITY_CAP: f64 = 10.0;
/// Displacement per step is at most this fraction of `δ`.
pub const CFL_FRACTION: f64 = 0.25;
pub const MAX_DT: f64 = 1e-3;
/// Weights below `1e-16·|γ|` are dropped at initialization.
pub const WEIGHT_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlobError {
    #[error("invalid blob configuration: {0}")]
    Config(String),
    #[error("density cap violated: max |ω|ε² = {achieved} exceeds M₀ = {cap}")]
    DensityCap { achieved: f64, cap: f64 },
    #[error("degenerate blob {blob}: {reason}")]
    Degenerate { blob: usize, reason: String },
    #[error("particle {index} of blob {blob_id} reached r = {r} at t = {time}")]
    Axis {
        index: usize,
        blob_id: usize,
        z: f64,
        r: f64,
        time: f64,
    },
    #[error("non-finite velocity at t = {time}")]
    NonFinite { time: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlobProfile {
    #[default]
    UniformPatch,
    TruncatedGaussian,
}

/// Lays particles on the lattice `c + h·(i, j)`, `|h·(i, j)| ≤ ε`,
/// `h = ε/⌈√(n/π)⌉`, with weights `x_r ω(x) h²` normalized to `Σw = γ`.
pub fn init_blob(
    profile: BlobProfile,
    center: Vec2<f64>,
    p: &RingParams<f64>,
    particles_per_blob: usize,
    blob_id: usize,
    density_cap: f64,
) -> Result<Vec<VortexParticle<f64>>, BlobError> {
    let eps = p.epsilon;
    if particles_per_blob < 16 {
        return Err(BlobError::Config(format!(
            "particles_per_blob must be at least 16, got {particles_per_blob}"
        )));
    }
    if !(center.r > eps) {
        return Err(BlobError::Config(format!(
            "blob centre radius {} must exceed epsilon {eps}",
            center.r
        )));
    }
    let per_radius = ((particles_per_blob as f64 / std::f64::consts::PI).sqrt()).ceil() as i64;
    let h = eps / per_radius as f64;
    let sigma = eps / 3.0;
    let mut raw = Vec::new();
    for i in -per_radius..=per_radius {
        for j in -per_radius..=per_radius {
            let off = Vec2::new(i as f64 * h, j as f64 * h);
            if off.norm() > eps * (1.0 + 1e-12) {
                continue;
            }
            let omega = match profile {
                BlobProfile::UniformPatch => 1.0,
                BlobProfile::TruncatedGaussian => (-off.norm_sq() / (2.0 * sigma * sigma)).exp(),
            };
            let pos = center + off;
            raw.push((pos, pos.r * omega * h * h));
        }
    }
    let mut total = CompensatedSum::new();
    for &(_, w) in &raw {
        total.add(w);
    }
    let scale = p.gamma / total.value();
    let floor = WEIGHT_FLOOR * p.gamma.abs();
    let particles: Vec<_> = raw
        .into_iter()
        .map(|(pos, w)| VortexParticle::new(pos, w * scale, blob_id))
        .filter(|q| q.weight.abs() >= floor)
        .collect();
    let max_omega = particles
        .iter()
        .map(|q| (q.weight / (q.pos.r * h * h)).abs())
        .fold(0.0, f64::max);
    let achieved = max_omega * eps * eps;
    if achieved > density_cap {
        return Err(BlobError::DensityCap {
            achieved,
            cap: density_cap,
        });
    }
    Ok(particles)
}

/// Largest `|ω|ε²` implied by a blob laid out by [`init_blob`] with `particles_per_blob`.
pub fn implied_density(particles: &[VortexParticle<f64>], eps: f64, particles_per_blob: usize) -> f64 {
    let per_radius = ((particles_per_blob as f64 / std::f64::consts::PI).sqrt()).ceil();
    let h = eps / per_radius;
    particles
        .iter()
        .map(|q| (q.weight / (q.pos.r * h * h)).abs())
        .fold(0.0, f64::max)
        * eps
        * eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobState {
    pub particles: Vec<VortexParticle<f64>>,
    pub time: f64,
    pub params: RingParams<f64>,
    pub delta: f64,
    /// Initial blob centres `X_{i,0}`; tail masses and extents are measured from them.
    pub reference: Vec<Vec2<f64>>,
}

impl BlobState {
    /// One blob per ring, centred at `X_{i,0} = X* + Y_{i,0}/√L`.
    pub fn new(
        p: &RingParams<f64>,
        profile: BlobProfile,
        particles_per_blob: usize,
        delta: f64,
        density_cap: f64,
    ) -> Result<Self, BlobError> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(BlobError::Config(format!("delta must be positive, got {delta}")));
        }
        let reference = p.x0();
        let mut particles = Vec::new();
        for (i, &c) in reference.iter().enumerate() {
            particles.extend(init_blob(profile, c, p, particles_per_blob, i, density_cap)?);
        }
        Ok(BlobState {
            particles,
            time: 0.0,
            params: p.clone(),
            delta,
            reference,
        })
    }

    pub fn n_blobs(&self) -> usize {
        self.reference.len()
    }

    pub fn blob(&self, i: usize) -> impl Iterator<Item = &VortexParticle<f64>> {
        self.particles.iter().filter(move |q| q.blob_id == i)
    }

    pub fn circulation(&self, i: usize) -> f64 {
        let mut acc = CompensatedSum::new();
        for q in self.blob(i) {
            acc.add(q.weight);
        }
        acc.value()
    }

    pub fn positions(&self) -> Vec<Vec2<f64>> {
        self.particles.iter().map(|q| q.pos).collect()
    }
}

/// Velocity field evaluator over a fixed source set, parallel over targets.
/// Each target is reduced in source order with a compensated sum, so the result
/// does not depend on the worker count.
pub struct VelocityEvaluator {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl std::fmt::Debug for VelocityEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VelocityEvaluator")
            .field("workers", &self.workers)
            .finish()
    }
}

impl VelocityEvaluator {
    pub fn new(workers: usize) -> Result<Self, BlobError> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| BlobError::Config(format!("cannot build worker pool: {e}")))?;
        Ok(VelocityEvaluator { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `u(x_t) = Σ_k x_r⁻¹ ∇⊥G_δ(x_t, y_k) w_k` for every target.
    pub fn velocities(
        &self,
        targets: &[Vec2<f64>],
        sources: &[Vec2<f64>],
        weights: &[f64],
        delta: f64,
    ) -> Vec<Vec2<f64>> {
        let d2 = delta * delta;
        self.pool.install(|| {
            targets
                .par_iter()
                .map(|&x| {
                    let mut acc = CompensatedSum2::new();
                    for (&y, &w) in sources.iter().zip(weights) {
                        acc.add(unit_velocity_fast(x, y, d2) * w);
                    }
                    acc.value()
                })
                .collect()
        })
    }

    /// `ℰ_i = -Σ_{k≠l} G_δ(x_k, x_l) w_k w_l` over one blob.
    pub fn energy(&self, pos: &[Vec2<f64>], w: &[f64], delta: f64) -> f64 {
        let d2 = delta * delta;
        let rows: Vec<f64> = self.pool.install(|| {
            (0..pos.len())
                .into_par_iter()
                .map(|k| {
                    let mut acc = CompensatedSum::new();
                    for l in 0..pos.len() {
                        if l != k {
                            acc.add(green_fast(pos[k], pos[l], d2) * w[l]);
                        }
                    }
                    acc.value() * w[k]
                })
                .collect()
        });
        let mut total = CompensatedSum::new();
        for r in rows {
            total.add(r);
        }
        -total.value()
    }
}

#[inline]
fn green_fast(x: Vec2<f64>, y: Vec2<f64>, d2: f64) -> f64 {
    let prod = x.r * y.r;
    let s = ((x - y).norm_sq() + d2) / prod;
    -prod.sqrt() * f_and_deriv_elliptic(s).0 / std::f64::consts::TAU
}

/// Per-step record returned by [`BlobSim::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub dt: f64,
    /// `max_k |u(x_k)|` at the start of the step.
    pub max_speed: f64,
}

/// Stateful driver around [`BlobState`] with a fixed worker pool.
#[derive(Debug)]
pub struct BlobSim {
    pub state: BlobState,
    eval: VelocityEvaluator,
    weights: Vec<f64>,
    pub steps: usize,
}

impl BlobSim {
    pub fn new(state: BlobState, workers: usize) -> Result<Self, BlobError> {
        if !(state.delta > 0.0) {
            return Err(BlobError::Config("blob simulation requires delta > 0".into()));
        }
        let weights = state.particles.iter().map(|q| q.weight).collect();
        Ok(BlobSim {
            state,
            eval: VelocityEvaluator::new(workers)?,
            weights,
            steps: 0,
        })
    }

    pub fn evaluator(&self) -> &VelocityEvaluator {
        &self.eval
    }

    /// Total induced velocity `u` (not divided by `L`) at every particle.
    pub fn particle_velocities(&self, positions: &[Vec2<f64>]) -> Vec<Vec2<f64>> {
        self.eval
            .velocities(positions, positions, &self.weights, self.state.delta)
    }

    /// `min(0.25 δ L / max|u|, 1e-3)`.
    pub fn stable_dt(&self, max_speed: f64) -> f64 {
        let l = self.state.params.log_eps();
        if max_speed > 0.0 {
            (CFL_FRACTION * self.state.delta * l / max_speed).min(MAX_DT)
        } else {
            MAX_DT
        }
    }

    /// One RK2 (midpoint) step. `dt = None` selects [`Self::stable_dt`], clamped to `t_limit`.
    pub fn step(&mut self, dt: Option<f64>, t_limit: Option<f64>) -> Result<StepInfo, BlobError> {
        let l = self.state.params.log_eps();
        let x0 = self.state.positions();
        let k1 = self.particle_velocities(&x0);
        let max_speed = k1.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !max_speed.is_finite() {
            return Err(BlobError::NonFinite { time: self.state.time });
        }
        let mut dt = dt.unwrap_or_else(|| self.stable_dt(max_speed));
        if let Some(t_end) = t_limit {
            if self.state.time + dt >= t_end {
                dt = t_end - self.state.time;
            }
        }
        if !(dt > 0.0) {
            return Err(BlobError::Config(format!("time step must be positive, got {dt}")));
        }
        let mid: Vec<Vec2<f64>> = x0.iter().zip(&k1).map(|(&x, &u)| x + u * (0.5 * dt / l)).collect();
        self.check_axis(&mid, self.state.time + 0.5 * dt)?;
        let k2 = self.particle_velocities(&mid);
        let next: Vec<Vec2<f64>> = x0.iter().zip(&k2).map(|(&x, &u)| x + u * (dt / l)).collect();
        let t_next = match t_limit {
            Some(t_end) if dt == t_end - self.state.time => t_end,
            _ => self.state.time + dt,
        };
        self.check_axis(&next, t_next)?;
        for (q, x) in self.state.particles.iter_mut().zip(next) {
            q.pos = x;
        }
        self.state.time = t_next;
        self.steps += 1;
        Ok(StepInfo { dt, max_speed })
    }

    fn check_axis(&self, pos: &[Vec2<f64>], time: f64) -> Result<(), BlobError> {
        for (index, x) in pos.iter().enumerate() {
            if !x.is_finite() {
                return Err(BlobError::NonFinite { time });
            }
            if x.r <= 0.0 {
                return Err(BlobError::Axis {
                    index,
                    blob_id: self.state.particles[index].blob_id,
                    z: x.z,
                    r: x.r,
                    time,
                });
            }
        }
        Ok(())
    }

    /// Exterior field `F_i(x)` for each target.
    pub fn exterior_field_at(&self, i: usize, targets: &[Vec2<f64>]) -> Vec<Vec2<f64>> {
        let (src, w): (Vec<_>, Vec<_>) = self
            .state
            .particles
            .iter()
            .filter(|q| q.blob_id != i)
            .map(|q| (q.pos, q.weight))
            .unzip();
        self.eval.velocities(targets, &src, &w, self.state.delta)
    }

    pub fn blob_energy(&self, i: usize) -> Result<f64, BlobError> {
        let (pos, w): (Vec<_>, Vec<_>) = self.state.blob(i).map(|q| (q.pos, q.weight)).unzip();
        if pos.len() < 2 {
            return Err(BlobError::Degenerate {
                blob: i,
                reason: "energy needs at least two particles".into(),
            });
        }
        Ok(self.eval.energy(&pos, &w, self.state.delta))
    }
}

/// Advances `state` by one RK2 step of size `dt` on a single worker.
pub fn step(state: &BlobState, dt: f64) -> Result<BlobState, BlobError> {
    let mut sim = BlobSim::new(state.clone(), 1)?;
    sim.step(Some(dt), None)?;
    Ok(sim.state)
}

/// `F_i(x) = x_r⁻¹ Σ_{j≠i} Σ_k ∇⊥G_δ(x, y_k) w_k`.
pub fn exterior_field(state: &BlobState, i: usize, x: Vec2<f64>) -> Vec2<f64> {
    let d2 = state.delta * state.delta;
    let mut acc = CompensatedSum2::new();
    for q in state.particles.iter().filter(|q| q.blob_id != i) {
        acc.add(unit_velocity_fast(x, q.pos, d2) * q.weight);
    }
    acc.value()
}

/// `b_i = Σ_k x_k w_k / Σ_k w_k`.
pub fn center_of_vorticity(state: &BlobState, i: usize) -> Result<Vec2<f64>, BlobError> {
    let mut num = CompensatedSum2::new();
    let mut den = CompensatedSum::new();
    for q in state.blob(i) {
        num.add(q.pos * q.weight);
        den.add(q.weight);
    }
    let g = den.value();
    if g == 0.0 {
        return Err(BlobError::Degenerate {
            blob: i,
            reason: "zero total weight".into(),
        });
    }
    Ok(num.value() / g)
}

/// `ℰ_i` on a single worker.
pub fn blob_energy(state: &BlobState, i: usize) -> Result<f64, BlobError> {
    BlobSim::new(state.clone(), 1)?.blob_energy(i)
}

/// Fraction of blob `i`'s circulation within `radius` of `center`.
pub fn mass_in_ball(state: &BlobState, i: usize, center: Vec2<f64>, radius: f64) -> f64 {
    let mut inside = CompensatedSum::new();
    let mut total = CompensatedSum::new();
    for q in state.blob(i) {
        total.add(q.weight);
        if (q.pos - center).norm() <= radius {
            inside.add(q.weight);
        }
    }
    if total.value() == 0.0 {
        0.0
    } else {
        inside.value() / total.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailDirection {
    Radial,
    Vertical,
}

fn coordinate(x: Vec2<f64>, dir: TailDirection) -> f64 {
    match dir {
        TailDirection::Radial => x.r,
        TailDirection::Vertical => x.z,
    }
}

/// `m(R) = Σ_{|x_k·e - reference| ≥ R} w_k`.
pub fn tail_mass(state: &BlobState, i: usize, big_r: f64, dir: TailDirection, reference: f64) -> f64 {
    let mut acc = CompensatedSum::new();
    for q in state.blob(i) {
        if (coordinate(q.pos, dir) - reference).abs() >= big_r {
            acc.add(q.weight);
        }
    }
    acc.value()
}

/// Smooth cutoff `W_{R,η}`: 1 on `[0, R]`, 0 beyond `R + η`, smoothstep between.
/// `max |W'| · η = 3/2`.
pub fn cutoff(x: f64, big_r: f64, eta: f64) -> f64 {
    let u = ((x.abs() - big_r) / eta).clamp(0.0, 1.0);
    1.0 - u * u * (3.0 - 2.0 * u)
}

/// `μ(R, η) = Σ_k (1 - W_{R,η}(x_k·e - reference)) w_k`.
pub fn smoothed_tail_mass(
    state: &BlobState,
    i: usize,
    big_r: f64,
    eta: f64,
    dir: TailDirection,
    reference: f64,
) -> f64 {
    let mut acc = CompensatedSum::new();
    for q in state.blob(i) {
        acc.add((1.0 - cutoff(coordinate(q.pos, dir) - reference, big_r, eta)) * q.weight);
    }
    acc.value()
}

/// `(R_t, Z_t) = (max_k |x_{k,r} - X_{i,0,r}|, max_k |x_{k,z} - z*|)`.
pub fn support_extents(state: &BlobState, i: usize) -> Result<(f64, f64), BlobError> {
    let r0 = state.reference[i].r;
    let z0 = state.params.z_star;
    let mut any = false;
    let (mut rt, mut zt) = (0.0_f64, 0.0_f64);
    for q in state.blob(i) {
        any = true;
        rt = rt.max((q.pos.r - r0).abs());
        zt = zt.max((q.pos.z - z0).abs());
    }
    if any {
        Ok((rt, zt))
    } else {
        Err(BlobError::Degenerate {
            blob: i,
            reason: "no particles".into(),
        })
    }
}

/// Whether blob `i` lies in `{|r - X_{i,0,r}| ≤ d/√L, |z - z*| ≤ h}`.
pub fn in_strip(state: &BlobState, i: usize, d: f64, h: f64) -> bool {
    let half_width = d / state.params.sqrt_log_eps();
    match support_extents(state, i) {
        Ok((rt, zt)) => rt <= half_width && zt <= h,
        Err(_) => false,
    }
}

/// One row of the diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub blob: usize,
    pub b_z: f64,
    pub b_r: f64,
    pub energy: f64,
    pub mass_in_ball: f64,
    pub m_radial: f64,
    pub m_vertical: f64,
    pub mu_radial: f64,
    pub r_t: f64,
    pub z_t: f64,
}

/// Thresholds for the tail-mass columns of [`DiagnosticsRow`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSettings {
    pub radial_r: f64,
    pub vertical_r: f64,
    pub eta: f64,
}

/// Diagnostics rows for every blob, with balls centred at `ball_centers`.
pub fn localization_diag(
    sim: &BlobSim,
    ball_centers: &[Vec2<f64>],
    ball_radius: f64,
    tails: TailSettings,
) -> Result<Vec<DiagnosticsRow>, BlobError> {
    let st = &sim.state;
    (0..st.n_blobs())
        .map(|i| {
            let b = center_of_vorticity(st, i)?;
            let (r_t, z_t) = support_extents(st, i)?;
            let r0 = st.reference[i].r;
            Ok(DiagnosticsRow {
                t: st.time,
                blob: i,
                b_z: b.z,
                b_r: b.r,
                energy: sim.blob_energy(i)?,
                mass_in_ball: mass_in_ball(st, i, ball_centers[i], ball_radius),
                m_radial: tail_mass(st, i, tails.radial_r, TailDirection::Radial, r0),
                m_vertical: tail_mass(st, i, tails.vertical_r, TailDirection::Vertical, st.params.z_star),
                mu_radial: smoothed_tail_mass(st, i, tails.radial_r, tails.eta, TailDirection::Radial, r0),
                r_t,
                z_t,
            })
        })
        .collect()
}

/// Per-time quantities needed by the motion laws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionSample {
    pub t: f64,
    pub b: Vec<Vec2<f64>>,
    pub energy: Vec<f64>,
    /// `F_i(b_i)`.
    pub field_at_b: Vec<Vec2<f64>>,
}

pub fn motion_sample(sim: &BlobSim) -> Result<MotionSample, BlobError> {
    let st = &sim.state;
    let n = st.n_blobs();
    let mut b = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    let mut field = Vec::with_capacity(n);
    for i in 0..n {
        let bi = center_of_vorticity(st, i)?;
        b.push(bi);
        energy.push(sim.blob_energy(i)?);
        field.push(sim.exterior_field_at(i, &[bi])[0]);
    }
    Ok(MotionSample {
        t: st.time,
        b,
        energy,
        field_at_b: field,
    })
}

/// Measured minus predicted values of the motion laws for one blob at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionResidual {
    pub t: f64,
    pub blob: usize,
    /// `db_r/dt - F_r(b)/L`.
    pub radial: f64,
    /// `db/dt - F(b)/L - γ e_z/(4π b_r)`.
    pub binormal: Vec2<f64>,
    /// `dℰ/dt - (γ²/2π) F_r(b)`.
    pub energy: f64,
    /// `F_i(b_i) - (γ/2π) Σ_{j≠i} (b_i - b_j)⊥/|b_i - b_j|²`.
    pub interaction: Vec2<f64>,
    /// `db/dt` itself.
    pub velocity: Vec2<f64>,
}

/// Central-difference residuals at every interior sample.
pub fn motion_law_residuals(history: &[MotionSample], p: &RingParams<f64>) -> Result<Vec<MotionResidual>, BlobError> {
    if history.len() < 3 {
        return Err(BlobError::Config(format!(
            "motion laws need at least 3 samples, got {}",
            history.len()
        )));
    }
    let l = p.log_eps();
    let g = p.gamma;
    let tau = std::f64::consts::TAU;
    let mut out = Vec::new();
    for k in 1..history.len() - 1 {
        let (a, s, c) = (&history[k - 1], &history[k], &history[k + 1]);
        let dt = c.t - a.t;
        for i in 0..s.b.len() {
            let db = (c.b[i] - a.b[i]) / dt;
            let de = (c.energy[i] - a.energy[i]) / dt;
            let f = s.field_at_b[i];
            let mut pair = Vec2::zero();
            for j in 0..s.b.len() {
                if j != i {
                    let d = s.b[i] - s.b[j];
                    pair += d.perp() / d.norm_sq();
                }
            }
            out.push(MotionResidual {
                t: s.t,
                blob: i,
                radial: db.r - f.r / l,
                binormal: db - f / l - Vec2::e_z() * (g / (2.0 * tau * s.b[i].r)),
                energy: de - g * g / tau * f.r,
                interaction: f - pair * (g / tau),
                velocity: db,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    time: f64,
    delta: f64,
    params: RingParams<f64>,
    reference: Vec<Vec2<f64>>,
    particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    blob_id: usize,
    z: f64,
    r: f64,
    weight: f64,
}

/// Writes a JSON-lines checkpoint: a header line, then one line per particle.
pub fn write_checkpoint<W: Write>(state: &BlobState, mut out: W) -> Result<(), BlobError> {
    let io = |e: std::io::Error| BlobError::Checkpoint(e.to_string());
    let ser = |e: serde_json::Error| BlobError::Checkpoint(e.to_string());
    let header = CheckpointHeader {
        time: state.time,
        delta: state.delta,
        params: state.params.clone(),
        reference: state.reference.clone(),
        particles: state.particles.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(ser)?).map_err(io)?;
    for q in &state.particles {
        let rec = CheckpointRecord {
            blob_id: q.blob_id,
            z: q.pos.z,
            r: q.pos.r,
            weight: q.weight,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(ser)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<BlobState, BlobError> {
    let mut lines = input.lines();
    let bad = |m: String| BlobError::Checkpoint(m);
    let first = lines
        .next()
        .ok_or_else(|| bad("empty checkpoint".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    let mut particles = Vec::with_capacity(header.particles);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let rec: CheckpointRecord = serde_json::from_str(&line).map_err(|e| bad(format!("record {}: {e}", n + 1)))?;
        particles.push(VortexParticle::new(Vec2::new(rec.z, rec.r), rec.weight, rec.blob_id));
    }
    if particles.len() != header.particles {
        return Err(bad(format!(
            "header announces {} particles, found {}",
            header.particles,
            particles.len()
        )));
    }
    Ok(BlobState {
        particles,
        time: header.time,
        params: header.params,
        delta: header.delta,
        reference: header.reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{velocity_decomposed, velocity_from_stream, KernelEvalConfig};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn params(eps: f64, y0: Vec<Vec2<f64>>) -> RingParams<f64> {
        RingParams::new(2.0 * PI, eps, 0.0, 1.0, y0).unwrap()
    }

    fn one_ring(eps: f64) -> RingParams<f64> {
        params(eps, vec![Vec2::zero()])
    }

    fn two_rings(eps: f64) -> RingParams<f64> {
        params(eps, vec![Vec2::new(0.0, 0.6), Vec2::new(0.0, -0.6)])
    }

    #[test]
    fn patch_is_normalized_and_supported() {
        let p = one_ring(0.05);
        let c = Vec2::new(0.0, 1.0);
        let blob = init_blob(BlobProfile::UniformPatch, c, &p, 400, 0, DEFAULT_DENSITY_CAP).unwrap();
        let total: f64 = crate::summation::sum(blob.iter().map(|q| q.weight));
        assert!((total - 2.0 * PI).abs() < 1e-12);
        assert!(blob.iter().all(|q| (q.pos - c).norm() <= 0.05 * (1.0 + 1e-12)));
        assert!(blob.len() >= 400);
        assert!(blob.iter().all(|q| q.weight > 0.0));
    }

    #[test]
    fn patch_center_skews_outward() {
        // First moment of x_r over a disc: b_r = c_r + ε²/(4 c_r).
        let eps = 0.05;
        let p = one_ring(eps);
        let c = Vec2::new(0.0, 1.0);
        let st = BlobState {
            particles: init_blob(BlobProfile::UniformPatch, c, &p, 4000, 0, DEFAULT_DENSITY_CAP).unwrap(),
            time: 0.0,
            params: p,
            delta: eps / 2.0,
            reference: vec![c],
        };
        let b = center_of_vorticity(&st, 0).unwrap();
        let skew = eps * eps / 4.0;
        assert!(b.z.abs() < 1e-14);
        assert!((b.r - 1.0 - skew).abs() < 0.05 * skew, "{}", b.r - 1.0);
    }

    #[test]
    fn gaussian_profile_and_density_cap() {
        let p = one_ring(0.05);
        let c = Vec2::new(0.0, 1.0);
        let g = init_blob(BlobProfile::TruncatedGaussian, c, &p, 400, 0, DEFAULT_DENSITY_CAP).unwrap();
        let d = implied_density(&g, 0.05, 400);
        assert!(d > 8.0 && d < 10.0, "{d}");
        assert!(matches!(
            init_blob(BlobProfile::TruncatedGaussian, c, &p, 400, 0, 5.0),
            Err(BlobError::DensityCap { .. })
        ));
        assert!(init_blob(BlobProfile::UniformPatch, Vec2::new(0.0, 0.01), &p, 400, 0, 10.0).is_err());
        assert!(init_blob(BlobProfile::UniformPatch, c, &p, 8, 0, 10.0).is_err());
    }

    fn small_state() -> BlobState {
        BlobState::new(
            &two_rings(0.05),
            BlobProfile::UniformPatch,
            40,
            0.025,
            DEFAULT_DENSITY_CAP,
        )
        .unwrap()
    }

    #[test]
    fn step_matches_kernel_velocity() {
        let st = small_state();
        let sim = BlobSim::new(st.clone(), 1).unwrap();
        let pos = st.positions();
        let fast = sim.particle_velocities(&pos);
        let cfg = KernelEvalConfig::exact().with_delta(st.delta);
        for k in [0, 7, pos.len() - 1] {
            let slow = velocity_from_stream(&st.particles, pos[k], &cfg).unwrap();
            assert!((fast[k] - slow).norm() <= 1e-12 * slow.norm());
        }
    }

    #[test]
    fn single_particle_moves_by_local_terms_only() {
        let p = one_ring(0.05);
        let q = VortexParticle::new(Vec2::new(0.0, 1.0), 1.0, 0);
        let cfg = KernelEvalConfig::exact().with_delta(0.025);
        let parts = velocity_decomposed(&[q], q.pos, &cfg).unwrap();
        assert_eq!(parts.k, Vec2::zero());
        let st = BlobState {
            particles: vec![q],
            time: 0.0,
            params: p,
            delta: 0.025,
            reference: vec![q.pos],
        };
        let sim = BlobSim::new(st, 1).unwrap();
        let u = sim.particle_velocities(&[q.pos])[0];
        assert!((u - (parts.l + parts.r)).norm() < 1e-12 * u.norm());
        assert!(u.r.abs() < 1e-15);
    }

    #[test]
    fn circulation_is_bitwise_conserved() {
        let st = small_state();
        let before: Vec<u64> = st.particles.iter().map(|q| q.weight.to_bits()).collect();
        let mut sim = BlobSim::new(st, 1).unwrap();
        for _ in 0..50 {
            sim.step(None, None).unwrap();
        }
        let after: Vec<u64> = sim.state.particles.iter().map(|q| q.weight.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn rk2_is_second_order() {
        let st = small_state();
        let run = |dt: f64, n: usize| {
            let mut sim = BlobSim::new(st.clone(), 1).unwrap();
            for _ in 0..n {
                sim.step(Some(dt), None).unwrap();
            }
            sim.state.positions()
        };
        let (a, b, c) = (run(4e-3, 5), run(2e-3, 10), run(1e-3, 20));
        let err = |x: &[Vec2<f64>], y: &[Vec2<f64>]| x.iter().zip(y).map(|(p, q)| (*p - *q).norm()).fold(0.0, f64::max);
        let ratio = err(&a, &b) / err(&b, &c);
        assert!((3.0..5.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn dt_is_clamped_to_end_time() {
        let mut sim = BlobSim::new(small_state(), 1).unwrap();
        let info = sim.step(None, Some(1e-5)).unwrap();
        assert_eq!(info.dt, 1e-5);
        assert_eq!(sim.state.time, 1e-5);
        let info = sim.step(None, None).unwrap();
        assert!(info.dt <= MAX_DT);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let st = small_state();
        let mut a = BlobSim::new(st.clone(), 1).unwrap();
        let mut b = BlobSim::new(st, 3).unwrap();
        for _ in 0..5 {
            a.step(None, None).unwrap();
            b.step(None, None).unwrap();
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn exterior_field_linearity() {
        let st = small_state();
        let x = Vec2::new(0.1, 1.05);
        assert_eq!(
            exterior_field(
                &BlobState {
                    particles: st.blob(0).cloned().collect(),
                    reference: vec![st.reference[0]],
                    ..st.clone()
                },
                0,
                x
            ),
            Vec2::zero()
        );
        let own: Vec<_> = st.blob(0).cloned().collect();
        let cfg = KernelEvalConfig::exact().with_delta(st.delta);
        let total = velocity_from_stream(&st.particles, x, &cfg).unwrap();
        let own_u = velocity_from_stream(&own, x, &cfg).unwrap();
        let f = exterior_field(&st, 0, x);
        assert!((f + own_u - total).norm() < 1e-12 * total.norm());
        let sim = BlobSim::new(st.clone(), 1).unwrap();
        assert_eq!(sim.exterior_field_at(0, &[x])[0], f);
    }

    #[test]
    fn mirror_blobs_have_opposite_radial_exterior_fields() {
        let p = params(0.05, vec![Vec2::new(0.1, 0.6), Vec2::new(-0.1, 0.6 - 1e-9)]);
        let c1 = Vec2::new(-0.1, 1.0);
        let c2 = Vec2::new(0.1, 1.0);
        let mut particles = init_blob(BlobProfile::UniformPatch, c1, &p, 60, 0, 10.0).unwrap();
        particles.extend(init_blob(BlobProfile::UniformPatch, c2, &p, 60, 1, 10.0).unwrap());
        let st = BlobState {
            particles,
            time: 0.0,
            params: p,
            delta: 0.025,
            reference: vec![c1, c2],
        };
        let b1 = center_of_vorticity(&st, 0).unwrap();
        let b2 = center_of_vorticity(&st, 1).unwrap();
        let f1 = exterior_field(&st, 0, b1);
        let f2 = exterior_field(&st, 1, b2);
        assert!((f1.r + f2.r).abs() < 1e-12);
        assert!((f1.z - f2.z).abs() < 1e-12);
    }

    #[test]
    fn center_of_vorticity_examples() {
        let p = one_ring(0.05);
        let mk = |pts: Vec<(f64, f64)>| BlobState {
            particles: pts
                .into_iter()
                .map(|(z, r)| VortexParticle::new(Vec2::new(z, r), 1.0, 0))
                .collect(),
            time: 0.0,
            params: p.clone(),
            delta: 0.01,
            reference: vec![Vec2::new(0.0, 1.0)],
        };
        assert_eq!(
            center_of_vorticity(&mk(vec![(0.0, 1.0), (0.0, 3.0)]), 0).unwrap(),
            Vec2::new(0.0, 2.0)
        );
        assert_eq!(
            center_of_vorticity(&mk(vec![(0.4, 1.5)]), 0).unwrap(),
            Vec2::new(0.4, 1.5)
        );
        assert!(center_of_vorticity(&mk(vec![]), 0).is_err());
    }

    #[test]
    fn energy_properties() {
        let st = small_state();
        let e = blob_energy(&st, 0).unwrap();
        assert!(e > 0.0);
        let mut doubled = st.clone();
        doubled.particles.iter_mut().for_each(|q| q.weight *= 2.0);
        assert!((blob_energy(&doubled, 0).unwrap() - 4.0 * e).abs() < 1e-12 * e);
        let mut shuffled = st.clone();
        shuffled.particles.reverse();
        assert!((blob_energy(&shuffled, 0).unwrap() - e).abs() < 1e-12 * e);
    }

    #[test]
    fn patch_energy_leading_order() {
        // ℰ(0) ≈ (γ²/2π) b_r (L + O(1)) for a uniform patch.
        let eps = 0.01;
        let p = one_ring(eps);
        let st = BlobState::new(&p, BlobProfile::UniformPatch, 400, eps / 2.0, DEFAULT_DENSITY_CAP).unwrap();
        let b = center_of_vorticity(&st, 0).unwrap();
        let lead = 2.0 * PI * p.log_eps() * b.r;
        let ratio = blob_energy(&st, 0).unwrap() / lead;
        assert!((0.8..1.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn mass_and_tails() {
        let st = small_state();
        let c = st.reference[0];
        assert_eq!(mass_in_ball(&st, 0, c, 10.0), 1.0);
        assert_eq!(mass_in_ball(&st, 0, Vec2::new(5.0, 5.0), 1e-3), 0.0);
        assert_eq!(mass_in_ball(&st, 0, c, 0.05 * (1.0 + 1e-9)), 1.0);
        let g = st.circulation(0);
        assert_eq!(tail_mass(&st, 0, 1.0, TailDirection::Radial, c.r), 0.0);
        assert!((tail_mass(&st, 0, 0.0, TailDirection::Vertical, 0.0) - g).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let m = tail_mass(&st, 0, k as f64 * 0.003, TailDirection::Radial, c.r);
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn cutoff_slope_bound() {
        let eta = 0.1;
        let mut max_slope = 0.0_f64;
        let n = 100_000;
        for k in 0..n {
            let x = 1.0 + eta * k as f64 / n as f64;
            let h = 1e-7;
            let s = (cutoff(x + h, 1.0, eta) - cutoff(x - h, 1.0, eta)).abs() / (2.0 * h);
            max_slope = max_slope.max(s);
        }
        assert!((max_slope * eta - 1.5).abs() < 1e-3);
        assert!(max_slope * eta <= 2.0);
        assert_eq!(cutoff(0.5, 1.0, eta), 1.0);
        assert_eq!(cutoff(1.2, 1.0, eta), 0.0);
    }

    #[test]
    fn extents_and_strip() {
        let st = small_state();
        for i in 0..2 {
            let (rt, zt) = support_extents(&st, i).unwrap();
            assert!(rt <= 0.05 + 1e-12 && zt <= 0.05 + 1e-12);
            assert!(in_strip(&st, i, st.params.d0(), 1.0));
        }
        assert!(!in_strip(&st, 0, 1e-4, 1.0));
    }

    #[test]
    fn motion_residuals_need_history() {
        let sim = BlobSim::new(small_state(), 1).unwrap();
        let s = motion_sample(&sim).unwrap();
        assert!(motion_law_residuals(&[s.clone(), s], &sim.state.params).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut sim = BlobSim::new(small_state(), 1).unwrap();
        sim.step(None, None).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&sim.state, &mut buf).unwrap();
        let back = read_checkpoint(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, sim.state);
        for (a, b) in back.particles.iter().zip(&sim.state.particles) {
            assert_eq!(a.pos.z.to_bits(), b.pos.z.to_bits());
            assert_eq!(a.pos.r.to_bits(), b.pos.r.to_bits());
            assert_eq!(a.weight.to_bits(), b.weight.to_bits());
        }
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(std::io::Cursor::new(truncated)).is_err());
    }

    proptest! {
        #[test]
        fn sandwich_inequality(big_r in 0.002..0.08f64, eta in 0.001..0.05f64, dir in prop::bool::ANY) {
            let st = small_state();
            let dir = if dir { TailDirection::Radial } else { TailDirection::Vertical };
            for i in 0..2 {
                let reference = match dir { TailDirection::Radial => st.reference[i].r, TailDirection::Vertical => 0.0 };
                let m = tail_mass(&st, i, big_r, dir, reference);
                let lower = smoothed_tail_mass(&st, i, big_r, eta, dir, reference);
                let upper = smoothed_tail_mass(&st, i, big_r - eta, eta, dir, reference);
                prop_assert!(lower <= m + 1e-14);
                prop_assert!(m <= upper + 1e-14);
            }
        }

        #[test]
        fn translation_equivariance(dz in -1.0..1.0f64, dr in -0.2..0.2f64) {
            let st = small_state();
            let b = center_of_vorticity(&st, 1).unwrap();
            let mut moved = st.clone();
            moved.particles.iter_mut().for_each(|q| q.pos += Vec2::new(dz, dr));
            let b2 = center_of_vorticity(&moved, 1).unwrap();
            prop_assert!((b2 - b - Vec2::new(dz, dr)).norm() < 1e-14);
        }
    }
}
