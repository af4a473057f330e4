//! Configuration parsing, CSV/JSON persistence, replay and the kernel validation report.
//!
//! CSV files always carry a header, use LF line endings and print reals with 17
//! significant digits, so a value read back parses to the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::blob::DiagnosticsRow;
use crate::experiments::{
    compute_invariants, ExperimentConfig, ExperimentError, InvariantRow, RunManifest, RunOutput, Table, TrajectoryRow,
};
use crate::geom::Vec2;
use crate::kernel::{
    f_kernel, kernel_bound_sweep, velocity_3d_formula, velocity_decomposed, velocity_from_stream, KernelEvalConfig,
    KernelMethod, VortexParticle, LOG_REMAINDER_C0, SMALL_S_LIMIT, SMALL_S_LIMIT_TOL,
};

pub const TRAJECTORY_HEADER: &str = "t,blob,z,r";
pub const DIAGNOSTICS_HEADER: &str = "t,blob,b_z,b_r,energy,mass_in_ball,m_radial,m_vertical,mu_radial,R_t,Z_t";
pub const INVARIANTS_HEADER: &str = "t,name,value";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {message}")]
    Read { path: String, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("override refers to unknown key `{0}`")]
    UnknownKey(String),
    #[error(transparent)]
    Invalid(#[from] ExperimentError),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Csv { path: String, line: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Reads a JSON config, fills defaults, applies `key.path=value` overrides and validates.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string(), overrides)
}

pub fn parse_config_str(text: &str, origin: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let cfg = from_value(raw)?;
    let cfg = if overrides.is_empty() {
        cfg
    } else {
        let mut full = serde_json::to_value(&cfg).map_err(|e| ConfigError::Schema {
            field: ".".into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut full, o)?;
        }
        from_value(full)?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn from_value(v: Value) -> Result<ExperimentConfig, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::Schema {
            field,
            message: e.into_inner().to_string(),
        }
    })
}

/// Sets `a.b.c` in `doc` to `value`, parsed as JSON when possible and as a string otherwise.
/// Every path segment must already exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::OverrideSyntax(assignment.to_string()));
    }
    let mut node = doc;
    for seg in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV

fn real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

pub fn trajectories_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for r in rows {
        real(&mut s, r.t);
        let _ = write!(s, ",{},", r.blob);
        real(&mut s, r.z);
        s.push(',');
        real(&mut s, r.r);
        s.push('\n');
    }
    s
}

pub fn diagnostics_csv(rows: &[DiagnosticsRow]) -> String {
    let mut s = String::new();
    s.push_str(DIAGNOSTICS_HEADER);
    s.push('\n');
    for r in rows {
        real(&mut s, r.t);
        let _ = write!(s, ",{}", r.blob);
        for v in [
            r.b_z,
            r.b_r,
            r.energy,
            r.mass_in_ball,
            r.m_radial,
            r.m_vertical,
            r.mu_radial,
            r.r_t,
            r.z_t,
        ] {
            s.push(',');
            real(&mut s, v);
        }
        s.push('\n');
    }
    s
}

pub fn invariants_csv(rows: &[InvariantRow]) -> String {
    let mut s = String::new();
    s.push_str(INVARIANTS_HEADER);
    s.push('\n');
    for r in rows {
        real(&mut s, r.t);
        let _ = write!(s, ",{},", r.name);
        real(&mut s, r.value);
        s.push('\n');
    }
    s
}

pub fn table_csv(t: &Table) -> String {
    let mut s = t.columns.join(",");
    s.push('\n');
    for row in &t.rows {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            real(&mut s, *v);
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectories(text: &str, origin: &str) -> Result<Vec<TrajectoryRow>, IoError> {
    let err = |line: usize, message: String| IoError::Csv {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == TRAJECTORY_HEADER => {}
        Some(h) => return Err(err(1, format!("expected header `{TRAJECTORY_HEADER}`, found `{h}`"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(n, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(n, format!("`{s}`: {e}")));
        rows.push(TrajectoryRow {
            t: num(f[0])?,
            blob: f[1].trim().parse().map_err(|e| err(n, format!("`{}`: {e}", f[1])))?,
            z: num(f[2])?,
            r: num(f[3])?,
        });
    }
    Ok(rows)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRow>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    parse_trajectories(&text, &path.display().to_string())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf, IoError> {
    fs::write(path, contents).map_err(|e| file_err(path, e))?;
    Ok(path.to_path_buf())
}

fn json_pretty<T: Serialize>(v: &T, path: &Path) -> Result<String, IoError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| file_err(path, e))?;
    s.push('\n');
    Ok(s)
}

/// Writes every file of a run into `dir` and returns their paths.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    let mut written = vec![
        write_file(&dir.join("trajectories.csv"), &trajectories_csv(&out.trajectories))?,
        write_file(&dir.join("diagnostics.csv"), &diagnostics_csv(&out.diagnostics))?,
        write_file(&dir.join("invariants.csv"), &invariants_csv(&out.invariants))?,
    ];
    for t in &out.tables {
        written.push(write_file(&dir.join(&t.file), &table_csv(t))?);
    }
    let mp = dir.join("manifest.json");
    written.push(write_file(&mp, &json_pretty(&out.manifest, &mp)?)?);
    let pp = dir.join("plotspec.json");
    written.push(write_file(&pp, &json_pretty(&out.plotspec, &pp)?)?);
    Ok(written)
}

/// Outcome of [`replay`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub recomputed: String,
    /// Whether the recomputed table equals the stored `invariants.csv` byte for byte.
    pub identical: bool,
    pub rows: usize,
}

/// Re-reads the trajectories next to `manifest` and recomputes the invariant table.
pub fn replay(manifest: &Path) -> Result<ReplayReport, IoError> {
    let m = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_trajectories(&dir.join("trajectories.csv"))?;
    let inv = compute_invariants(&m.config, &rows)?;
    let recomputed = invariants_csv(&inv);
    let stored_path = dir.join("invariants.csv");
    let stored = fs::read_to_string(&stored_path).map_err(|e| file_err(&stored_path, e))?;
    Ok(ReplayReport {
        identical: stored == recomputed,
        rows: inv.len(),
        recomputed,
    })
}

// ---------------------------------------------------------------------------
// Kernel validation

/// Deliberate defects for negative-control runs of the validation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelFault {
    #[default]
    None,
    /// Flips the sign of the local-induction velocity.
    FlipLocalInduction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheck {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub checks: Vec<KernelCheck>,
}

impl KernelReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:<6} {:>14} {:>12}  detail\n",
            "check", "result", "measured", "tolerance"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:<6} {:>14.6e} {:>12.3e}  {}",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.measured,
                c.tolerance,
                c.detail
            );
        }
        s
    }
}

pub const BACKEND_REL_TOL: f64 = 1e-9;
pub const VELOCITY_3D_REL_TOL: f64 = 1e-6;
pub const DECOMPOSITION_REL_TOL: f64 = 1e-9;
pub const SMALL_S_STABILITY_TOL: f64 = 1e-4;

fn check(name: &str, measured: f64, tolerance: f64, detail: String) -> KernelCheck {
    KernelCheck {
        name: name.to_string(),
        pass: measured <= tolerance,
        measured,
        tolerance,
        detail,
    }
}

fn random_particles(rng: &mut ChaCha8Rng, n: usize) -> Vec<VortexParticle<f64>> {
    (0..n)
        .map(|k| {
            let pos = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.2..2.0));
            VortexParticle::new(pos, rng.gen_range(0.1..2.0), k)
        })
        .collect()
}

fn random_target(rng: &mut ChaCha8Rng, avoid: &[VortexParticle<f64>]) -> Vec2<f64> {
    loop {
        let x = Vec2::new(rng.gen_range(-1.5..1.5), rng.gen_range(0.1..2.5));
        if avoid.iter().all(|p| (p.pos - x).norm() > 1e-2) {
            return x;
        }
    }
}

/// Runs the kernel oracle suite: backend agreement, velocity cross-checks, the
/// decomposition identity and the log-remainder constants.
pub fn validate_kernel(fault: KernelFault) -> Result<KernelReport, IoError> {
    let kerr = |e: crate::kernel::KernelError| IoError::File {
        path: "kernel".into(),
        message: e.to_string(),
    };
    let mut checks = Vec::new();
    let exact = KernelEvalConfig::exact();
    let quad = KernelEvalConfig::new(1e-12, 0.0, KernelMethod::AdaptiveQuadrature).map_err(kerr)?;

    let mut worst = 0.0_f64;
    let mut at = 0.0;
    let n = 200;
    for k in 0..n {
        let s = 10f64.powf(-10.0 + 16.0 * k as f64 / (n - 1) as f64);
        let a = f_kernel(s, &exact).map_err(kerr)?;
        let b = f_kernel(s, &quad).map_err(kerr)?;
        let rel = (a - b).abs() / b.abs();
        if rel > worst {
            worst = rel;
            at = s;
        }
    }
    checks.push(check(
        "f_backends",
        worst,
        BACKEND_REL_TOL,
        format!("elliptic vs quadrature, {n} log-spaced s in [1e-10, 1e6], worst at s = {at:.3e}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let q3 = KernelEvalConfig::new(1e-10, 0.0, KernelMethod::EllipticIntegral).map_err(kerr)?;
    let mut worst = 0.0_f64;
    for k in 0..20 {
        let parts = random_particles(&mut rng, 1 + k % 3);
        let x = random_target(&mut rng, &parts);
        let a = velocity_3d_formula(&parts, x, &q3).map_err(kerr)?;
        let b = velocity_from_stream(&parts, x, &exact).map_err(kerr)?;
        worst = worst.max((a - b).norm() / b.norm());
    }
    checks.push(check(
        "velocity_3d_vs_stream",
        worst,
        VELOCITY_3D_REL_TOL,
        "20 random configurations".into(),
    ));

    let mut worst = 0.0_f64;
    for k in 0..50 {
        let parts = random_particles(&mut rng, 1 + k % 4);
        let x = random_target(&mut rng, &parts);
        let mut split = velocity_decomposed(&parts, x, &exact).map_err(kerr)?;
        if fault == KernelFault::FlipLocalInduction {
            split.l = -split.l;
        }
        let total = velocity_from_stream(&parts, x, &exact).map_err(kerr)?;
        worst = worst.max((split.total() - total).norm() / total.norm());
    }
    checks.push(check(
        "decomposition_identity",
        worst,
        DECOMPOSITION_REL_TOL,
        "u_K + u_L + u_R against the full velocity at 50 points".into(),
    ));

    let sweep = kernel_bound_sweep(1e-8, 16.0, 400).map_err(kerr)?;
    checks.push(check(
        "log_remainder_sup",
        sweep.sup_log_remainder,
        LOG_REMAINDER_C0,
        format!("sup |F(s) + ½ln s| on [1e-8, 16] against C₀ = {LOG_REMAINDER_C0}"),
    ));
    checks.push(KernelCheck {
        name: "deriv_remainder_weighted".into(),
        pass: sweep.sup_deriv_remainder_weighted.is_finite(),
        measured: sweep.sup_deriv_remainder_weighted,
        tolerance: f64::INFINITY,
        detail: format!(
            "sup |F'(s) + 1/(2s)|/(1 + |ln s|); literal ratio to |ln s| reaches {:.3e}",
            sweep.sup_deriv_remainder_literal
        ),
    });

    let constant = |s: f64| -> Result<f64, IoError> { Ok(f_kernel(s, &quad).map_err(kerr)? + 0.5 * s.ln()) };
    let (c9, c10, c11) = (constant(1e-9)?, constant(1e-10)?, constant(1e-11)?);
    checks.push(check(
        "small_s_constant",
        (c10 - SMALL_S_LIMIT).abs(),
        SMALL_S_LIMIT_TOL,
        format!("F(s) + ½ln s at s = 1e-10 is {c10:.10}; stored {SMALL_S_LIMIT} ± {SMALL_S_LIMIT_TOL:e}"),
    ));
    checks.push(check(
        "small_s_stability",
        (c9 - c11).abs().max((c9 - c10).abs()),
        SMALL_S_STABILITY_TOL,
        format!("values at s = 1e-9, 1e-11: {c9:.10}, {c11:.10}"),
    ));
    Ok(KernelReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_experiment, ExperimentKind};

    const MINIMAL: &str = r#"{"name": "m", "kind": "leapfrog_ode", "gamma": 6.283185307179586,
        "epsilon": 0.01, "r_star": 1.0, "y0": [[0.0, 1.2], [0.0, -1.2]]}"#;

    #[test]
    fn minimal_config_is_defaulted() {
        let cfg = parse_config_str(MINIMAL, "mem", &[]).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::LeapfrogOde);
        assert_eq!(cfg.integrator.step, 1e-3);
        assert_eq!(cfg.blob.particles_per_blob, 400);
        assert_eq!(cfg.z_star, 0.0);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn config_errors() {
        let bad_eps = MINIMAL.replace("0.01", "1.5");
        let e = parse_config_str(&bad_eps, "mem", &[]).unwrap_err();
        assert!(e.to_string().contains("epsilon"), "{e}");
        let unknown = MINIMAL.replace("\"r_star\"", "\"radius\": 1, \"r_star\"");
        let e = parse_config_str(&unknown, "mem", &[]).unwrap_err();
        assert!(
            matches!(e, ConfigError::Schema { .. }) && e.to_string().contains("radius"),
            "{e}"
        );
        let e = parse_config_str("{\"name\": ", "mem", &[]).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 1, .. }), "{e}");
        let nested = MINIMAL.replace("\"r_star\"", "\"integrator\": {\"step\": \"fast\"}, \"r_star\"");
        let e = parse_config_str(&nested, "mem", &[]).unwrap_err();
        assert!(e.to_string().contains("integrator.step"), "{e}");
    }

    #[test]
    fn overrides_change_one_field() {
        let base = parse_config_str(MINIMAL, "mem", &[]).unwrap();
        let cfg = parse_config_str(MINIMAL, "mem", &["integrator.step=1e-4".into()]).unwrap();
        assert_eq!(cfg.integrator.step, 1e-4);
        let mut expect = base.clone();
        expect.integrator.step = 1e-4;
        assert_eq!(cfg, expect);
        let cfg = parse_config_str(MINIMAL, "mem", &["name=other".into(), "y0.1.1=-1.0".into()]).unwrap();
        assert_eq!(cfg.name, "other");
        assert_eq!(cfg.y0[1].r, -1.0);
        assert!(matches!(
            parse_config_str(MINIMAL, "mem", &["integrator.stepp=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            parse_config_str(MINIMAL, "mem", &["noequals".into()]),
            Err(ConfigError::OverrideSyntax(_))
        ));
    }

    #[test]
    fn csv_format() {
        let rows = vec![TrajectoryRow {
            t: 0.1,
            blob: 1,
            z: -1.0 / 3.0,
            r: 2.0,
        }];
        let text = trajectories_csv(&rows);
        assert_eq!(text.lines().next(), Some(TRAJECTORY_HEADER));
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        let back = parse_trajectories(&text, "mem").unwrap();
        assert_eq!(back, rows);
        assert_eq!(trajectories_csv(&[]), format!("{TRAJECTORY_HEADER}\n"));
        assert_eq!(diagnostics_csv(&[]), format!("{DIAGNOSTICS_HEADER}\n"));
        assert_eq!(invariants_csv(&[]), format!("{INVARIANTS_HEADER}\n"));
        assert!(parse_trajectories("t,z\n", "mem").is_err());
        assert!(parse_trajectories(&format!("{TRAJECTORY_HEADER}\n1,2,3\n"), "mem").is_err());
    }

    #[test]
    fn outputs_replay_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config_str(MINIMAL, "mem", &[]).unwrap();
        cfg.kind = ExperimentKind::RegimeComparison;
        cfg.integrator.t_end = Some(1.0);
        let out = run_experiment(&cfg).unwrap();
        let files = write_outputs(dir.path(), &out).unwrap();
        assert!(files.iter().any(|p| p.ends_with("marchioro_trajectories.csv")));
        let rep = replay(&dir.path().join("manifest.json")).unwrap();
        assert!(rep.identical);
        assert!(rep.rows > 0);
    }

    #[test]
    fn empty_trajectory_writes_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config_str(MINIMAL, "mem", &[]).unwrap();
        let mut out = run_experiment(&ExperimentConfig {
            kind: ExperimentKind::RegimeComparison,
            integrator: crate::experiments::IntegratorSettings {
                t_end: Some(0.01),
                ..cfg.integrator.clone()
            },
            ..cfg
        })
        .unwrap();
        out.trajectories.clear();
        out.invariants.clear();
        out.tables.clear();
        write_outputs(dir.path(), &out).unwrap();
        for (f, h) in [
            ("trajectories.csv", TRAJECTORY_HEADER),
            ("diagnostics.csv", DIAGNOSTICS_HEADER),
            ("invariants.csv", INVARIANTS_HEADER),
        ] {
            assert_eq!(fs::read_to_string(dir.path().join(f)).unwrap(), format!("{h}\n"));
        }
        assert!(replay(&dir.path().join("manifest.json")).unwrap().identical);
    }

    #[test]
    fn kernel_report_and_negative_control() {
        let ok = validate_kernel(KernelFault::None).unwrap();
        assert!(ok.all_passed(), "{}", ok.table());
        assert!(ok.table().contains("small_s_constant"));
        let bad = validate_kernel(KernelFault::FlipLocalInduction).unwrap();
        assert_eq!(bad.failed(), vec!["decomposition_identity"]);
    }
}
