use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hybrid_pe::bounds::estimator_constants;
use hybrid_pe::pe::certify_hybrid_pe;
use hybrid_pe::scenarios::{emit_report, run_motivational, run_spacecraft, Controller, ExperimentConfig, RunReport};
use hybrid_pe::HybridArc;

/// Hybrid gradient parameter estimation experiments.
#[derive(Parser)]
#[command(name = "hybrid-pe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its arcs, documents and manifest.
    Run {
        #[command(subcommand)]
        scenario: Scenario,
    },
    /// Certify hybrid PE of a regressor arc stored as CSV.
    CertifyPe {
        #[arg(long)]
        arc: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1)]
        rows: usize,
        /// Defaults to the number of components divided by `rows`.
        #[arg(long)]
        cols: Option<usize>,
    },
    /// Print the stability-constant ledger as JSON.
    Bounds {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Scenario {
    /// Sawtooth plant with jointly exciting regressors.
    Motivational {
        #[arg(long)]
        noise: bool,
        /// Also run the continuous- and discrete-time gradient baselines.
        #[arg(long)]
        baselines: bool,
        #[arg(long, default_value = "out/motivational")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Reaction-wheel spacecraft with momentum dumping.
    Spacecraft {
        #[arg(long, value_enum, default_value_t = ControllerArg::Pd)]
        controller: ControllerArg,
        #[arg(long, default_value = "out/spacecraft")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Pd,
    Pid,
}

impl From<ControllerArg> for Controller {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Pd => Controller::PdFeedforward,
            ControllerArg::Pid => Controller::PidBaseline,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn finish(report: &RunReport, out: &Path) -> Result<bool> {
    let files = emit_report(report, out).with_context(|| format!("writing {}", out.display()))?;
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario } => match scenario {
            Scenario::Motivational {
                noise,
                baselines,
                out,
                config,
            } => {
                let cfg = load_config(config.as_deref())?;
                let run = run_motivational(&cfg.motivational, baselines, noise)?;
                finish(&run.report()?, &out)
            }
            Scenario::Spacecraft { controller, out, config } => {
                let cfg = load_config(config.as_deref())?;
                let run = run_spacecraft(&cfg.spacecraft, controller.into())?;
                finish(&run.report()?, &out)
            }
        },
        Command::CertifyPe { arc, delta, rows, cols } => {
            let width = {
                let mut r = csv::Reader::from_path(&arc).with_context(|| format!("opening {}", arc.display()))?;
                r.headers()?.len().saturating_sub(2)
            };
            let cols = cols.unwrap_or(width / rows.max(1));
            let file = File::open(&arc).with_context(|| format!("opening {}", arc.display()))?;
            let psi = HybridArc::read_csv(file, rows, cols)?;
            let cert = certify_hybrid_pe(&psi, delta)?;
            println!("{}", serde_json::to_string_pretty(&cert)?);
            Ok(cert.mu > 0.0)
        }
        Command::Bounds { config } => {
            let cfg = load_config(config.as_deref())?;
            let ledger = estimator_constants(&cfg.bound_inputs())?;
            println!("{}", serde_json::to_string_pretty(&ledger)?);
            Ok(ledger.invariant_violations().is_empty())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
