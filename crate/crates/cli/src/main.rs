mod artifacts;
mod commands;
mod config;
mod report;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use morrey_lab::potentials::OperatorProbeReport;
use serde_json::{json, Value};

use crate::artifacts::{config_hash, RunDir, Table};
use crate::config::{ExperimentConfig, Suite, VerifyConfig};

/// Exit status 2: invalid input; 3: gate refusal; 4: numerical failure.
#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Io(String),
    Gate(Box<OperatorProbeReport>),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Schema(_) | CliError::Io(_) => 2,
            CliError::Gate(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Gate(r) => write!(
                f,
                "gate refused: probed lower bound {} of ||T_p|| at lambda = {} is not below 1 ({} probes, seed {})",
                r.max_ratio, r.lambda, r.probes, r.seed
            ),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<morrey_lab::error::Error> for CliError {
    fn from(e: morrey_lab::error::Error) -> Self {
        use morrey_lab::error::Error as E;
        match e {
            E::GateRefused { report } => CliError::Gate(report),
            E::Divergence { .. } | E::Numerical(_) => CliError::Numerical(e.to_string()),
            E::Io(err) => CliError::Io(err.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "morrey-lab", version, about = "Parabolic Morrey-class drift laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Morrey norm estimates and LPS / Hardy classification of a drift.
    Classify(RunArgs),
    /// Gate sweep and Duhamel-Neumann solve of the resolvent equation.
    Solve(RunArgs),
    /// Cauchy problem propagation from initial data.
    Propagate(RunArgs),
    /// Euler-Maruyama ensemble with occupation, Krylov and martingale diagnostics.
    Simulate(RunArgs),
    /// Module invariant suites at pinned sizes.
    Verify {
        /// Config file with `suite` and `output`; overrides the flags.
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Collates a run directory into flat CSV and a text summary.
    Report { run_dir: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON configuration file.
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn load(path: &Path, expected: &str, output: Option<PathBuf>) -> Result<(ExperimentConfig, Value), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_value(raw.clone()).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    if cfg.name() != expected {
        return Err(CliError::Schema(format!("config is for '{}', not '{expected}'", cfg.name())));
    }
    if let Some(dir) = output {
        cfg.set_output(dir);
    }
    cfg.prepare(path.parent().unwrap_or(Path::new(".")))?;
    Ok((cfg, raw))
}

fn execute(cfg: &ExperimentConfig, raw: &Value) -> Result<(), CliError> {
    if let ExperimentConfig::Report(r) = cfg {
        return report::report(&r.run_dir);
    }
    let hash = config_hash(raw);
    let mut canonical = raw.clone();
    if let Some(m) = canonical.as_object_mut() {
        m.remove("output");
    }
    let mut run = RunDir::open(cfg.output(), &hash)?;
    let result = match cfg {
        ExperimentConfig::Classify(c) => commands::classify(c, &mut run),
        ExperimentConfig::Solve(c) => commands::solve(c, &mut run),
        ExperimentConfig::Propagate(c) => commands::propagate(c, &mut run),
        ExperimentConfig::Simulate(c) => commands::simulate_run(c, &mut run),
        ExperimentConfig::Verify(c) => verify_run(c, &mut run),
        ExperimentConfig::Report(_) => unreachable!("handled above"),
    };
    match result {
        Ok(()) | Err(CliError::Gate(_)) | Err(CliError::Numerical(_)) => {
            run.finish(cfg.name(), &canonical, cfg.seeds())?;
            result
        }
        Err(e) => Err(e),
    }
}

fn verify_run(cfg: &VerifyConfig, run: &mut RunDir) -> Result<(), CliError> {
    let checks = verify::run(cfg.suite)?;
    let mut t = Table::new(
        "verify",
        vec![
            ("suite", "module suite"),
            ("check", "property checked"),
            ("pass", "whether the property holds"),
            ("value", "measured quantity"),
            ("limit", "threshold the value is compared with"),
        ],
    );
    for c in &checks {
        t.push(vec![c.suite.into(), c.check.into(), c.pass.into(), c.value.into(), c.limit.into()]);
    }
    run.csv(&t)?;
    let all_pass = checks.iter().all(|c| c.pass);
    run.json("verify.json", json!({ "suite": cfg.suite, "checks": checks, "all_pass": all_pass }))?;
    for c in &checks {
        println!(
            "{} {}/{}: value {:.4e} (limit {:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.suite,
            c.check,
            c.value,
            c.limit
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Numerical("verification checks failed".into()))
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("MORREY_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let loaded = match cli.command {
        Command::Classify(a) => load(&a.config, "classify", a.output),
        Command::Solve(a) => load(&a.config, "solve", a.output),
        Command::Propagate(a) => load(&a.config, "propagate", a.output),
        Command::Simulate(a) => load(&a.config, "simulate", a.output),
        Command::Verify { config: Some(path), output, .. } => load(&path, "verify", output),
        Command::Verify { config: None, suite, output } => {
            let output = output.unwrap_or_else(|| PathBuf::from("verify-out"));
            let raw = json!({ "command": "verify", "suite": suite, "output": output });
            Ok((ExperimentConfig::Verify(VerifyConfig { suite, output }), raw))
        }
        Command::Report { run_dir } => {
            let raw = json!({ "command": "report", "run_dir": run_dir });
            Ok((ExperimentConfig::Report(config::ReportConfig { run_dir }), raw))
        }
    };
    let outcome = loaded.and_then(|(cfg, raw)| execute(&cfg, &raw));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
