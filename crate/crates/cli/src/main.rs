use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ringlab::experiments::{compute_invariants, run_experiment, CriterionResult, ExperimentError, RunManifest};
use ringlab::io::{self, ConfigError, IoError, KernelFault};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "ringlab", version, about = "Leapfrogging vortex-ring experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry, e.g. `integrator.step=1e-4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check the kernel backends and print a pass/fail table.
    ValidateKernel {
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        #[arg(long, value_enum, default_value_t = Fault::None, hide = true)]
        inject_fault: Fault,
    },
    /// Recompute the invariant table of a trajectory file.
    Invariants {
        #[arg(long)]
        traj: PathBuf,
        /// Config of the run; defaults to the manifest.json beside the trajectory file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute invariants.csv of a finished run and compare it with the stored file.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the recomputed table into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    None,
    FlipLocalSign,
}

/// Failure with its exit status.
struct Failure(u8, String);

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure(EXIT_CONFIG, e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::Config(_) | IoError::Experiment(ExperimentError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILED,
        };
        Failure(code, e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        IoError::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides, out } => run(&config, &overrides, out),
        Command::ValidateKernel { json, inject_fault } => validate_kernel(json, inject_fault),
        Command::Invariants { traj, config, out } => invariants(&traj, config.as_deref(), out.as_deref()),
        Command::Replay { manifest, out } => replay(&manifest, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn print_criterion(c: &CriterionResult) {
    println!(
        "{} {:<28} {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.id,
        c.description
    );
    for p in &c.parts {
        println!(
            "       {} {:<12} {}",
            if p.pass { "ok  " } else { "FAIL" },
            p.label,
            p.detail
        );
    }
}

fn print_manifest(m: &RunManifest) {
    for c in &m.criteria {
        print_criterion(c);
    }
    for c in &m.checks {
        print_criterion(c);
    }
    if let Some(e) = &m.error {
        println!("run stopped early: {e}");
    }
    println!("wall clock {:.2} s", m.wall_clock_s);
}

fn run(config: &Path, overrides: &[String], out: Option<PathBuf>) -> Result<bool, Failure> {
    let cfg = io::parse_config(config, overrides)?;
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure(EXIT_CONFIG, "no output directory: pass --out or set output_dir".into()))?;
    let output = run_experiment(&cfg)?;
    io::write_outputs(&dir, &output)?;
    print_manifest(&output.manifest);
    println!("outputs in {}", dir.display());
    Ok(output.manifest.all_passed())
}

fn validate_kernel(json: bool, fault: Fault) -> Result<bool, Failure> {
    let fault = match fault {
        Fault::None => KernelFault::None,
        Fault::FlipLocalSign => KernelFault::FlipLocalInduction,
    };
    let report = io::validate_kernel(fault)?;
    if json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure(EXIT_FAILED, e.to_string()))?;
        println!("{text}");
    } else {
        print!("{}", report.table());
    }
    let failed = report.failed();
    if !failed.is_empty() {
        eprintln!("failed checks: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn invariants(traj: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<bool, Failure> {
    let cfg = match config {
        Some(c) => io::parse_config(c, &[])?,
        None => {
            let beside = traj.parent().unwrap_or(Path::new(".")).join("manifest.json");
            if !beside.exists() {
                return Err(Failure(
                    EXIT_CONFIG,
                    format!("{}: not found; pass --config", beside.display()),
                ));
            }
            io::read_manifest(&beside)?.config
        }
    };
    let rows = io::read_trajectories(traj)?;
    let table = io::invariants_csv(&compute_invariants(&cfg, &rows)?);
    match out {
        Some(p) => fs::write(p, table).map_err(|e| Failure(EXIT_FAILED, format!("{}: {e}", p.display())))?,
        None => print!("{table}"),
    }
    Ok(true)
}

fn replay(manifest: &Path, out: Option<&Path>) -> Result<bool, Failure> {
    let report = io::replay(manifest)?;
    if let Some(dir) = out {
        let p = dir.join("invariants.csv");
        fs::create_dir_all(dir)
            .and_then(|_| fs::write(&p, &report.recomputed))
            .map_err(|e| Failure(EXIT_FAILED, format!("{}: {e}", p.display())))?;
    }
    if report.identical {
        println!("invariants.csv reproduced exactly ({} rows)", report.rows);
    } else {
        println!("invariants.csv differs from the recomputed table");
    }
    Ok(report.identical)
}
