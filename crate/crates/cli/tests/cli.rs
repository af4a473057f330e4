use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ringlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringlab")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn short_regime_run(dir: &Path) -> Output {
    let cfg = configs().join("regime_comparison.json");
    ringlab(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "integrator.t_end=2.0",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn validate_kernel_passes_and_detects_injected_fault() {
    let ok = ringlab(&["validate-kernel"]);
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok.stdout));
    let table = text(&ok.stdout);
    assert!(
        table.contains("small_s_constant") && table.contains("0.0794415"),
        "{table}"
    );
    assert!(!table.contains("FAIL"));

    let bad = ringlab(&["validate-kernel", "--inject-fault", "flip-local-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(text(&bad.stderr).contains("decomposition_identity"));
}

#[test]
fn validate_kernel_json() {
    let out = ringlab(&["validate-kernel", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 7);
}

#[test]
fn run_writes_outputs_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = short_regime_run(dir.path());
    assert_eq!(out.status.code(), Some(0), "{}{}", text(&out.stdout), text(&out.stderr));
    for f in [
        "trajectories.csv",
        "diagnostics.csv",
        "invariants.csv",
        "manifest.json",
        "plotspec.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["integrator"]["t_end"], 2.0);
    assert_eq!(manifest["config"]["integrator"]["step"], 1e-3);

    let m = dir.path().join("manifest.json");
    let rep = ringlab(&["replay", "--manifest", m.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0), "{}", text(&rep.stdout));

    let traj = dir.path().join("trajectories.csv");
    let inv = ringlab(&["invariants", "--traj", traj.to_str().unwrap()]);
    assert_eq!(inv.status.code(), Some(0));
    assert_eq!(inv.stdout, fs::read(dir.path().join("invariants.csv")).unwrap());
}

#[test]
fn replay_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(short_regime_run(dir.path()).status.code(), Some(0));
    let inv = dir.path().join("invariants.csv");
    let tampered = fs::read_to_string(&inv).unwrap().replacen("e0\n", "e1\n", 1);
    fs::write(&inv, tampered).unwrap();
    let m = dir.path().join("manifest.json");
    let rep = ringlab(&["replay", "--manifest", m.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(1));
}

#[test]
fn criterion_failure_exits_one() {
    // The stated momentum bound is exceeded on this orbit, so the run reports a failed criterion.
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("leapfrog_ode.json");
    let out = ringlab(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("PASS 2") && stdout.contains("FAIL 4"), "{stdout}");
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = configs().join("leapfrog_ode.json");
    let (c, o) = (cfg.to_str().unwrap(), out_dir.to_str().unwrap());

    let eps = ringlab(&["run", "--config", c, "--set", "epsilon=1.5", "--out", o]);
    assert_eq!(eps.status.code(), Some(2));
    assert!(text(&eps.stderr).contains("epsilon"));

    let key = ringlab(&["run", "--config", c, "--set", "integrator.stepp=1", "--out", o]);
    assert_eq!(key.status.code(), Some(2));
    assert!(text(&key.stderr).contains("integrator.stepp"));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\n  \"name\": \"x\",\n  \"kind\": \n}\n").unwrap();
    let parse = ringlab(&["run", "--config", broken.to_str().unwrap(), "--out", o]);
    assert_eq!(parse.status.code(), Some(2));
    assert!(
        text(&parse.stderr).contains("broken.json:4:1"),
        "{}",
        text(&parse.stderr)
    );

    let schema = dir.path().join("schema.json");
    fs::write(
        &schema,
        fs::read_to_string(&cfg).unwrap().replace("\"r_star\"", "\"rstar\""),
    )
    .unwrap();
    let sch = ringlab(&["run", "--config", schema.to_str().unwrap(), "--out", o]);
    assert_eq!(sch.status.code(), Some(2));
    assert!(text(&sch.stderr).contains("rstar"));

    let missing = ringlab(&["run", "--config", "/nonexistent/cfg.json", "--out", o]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(text(&missing.stderr).contains("/nonexistent/cfg.json"));

    assert!(!out_dir.exists());
}

#[test]
fn invariants_without_manifest_needs_config() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("trajectories.csv");
    fs::write(&traj, "t,blob,z,r\n0,0,0,1.2\n0,1,0,-1.2\n").unwrap();
    let t = traj.to_str().unwrap();
    assert_eq!(ringlab(&["invariants", "--traj", t]).status.code(), Some(2));
    let cfg = configs().join("leapfrog_ode.json");
    let out = ringlab(&["invariants", "--traj", t, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let table = text(&out.stdout);
    assert!(table.starts_with("t,name,value\n"));
    assert!(
        table.contains(",momentum,1.4399999999999999e0") || table.contains(",momentum,1.4400000000000000e0"),
        "{table}"
    );
}
