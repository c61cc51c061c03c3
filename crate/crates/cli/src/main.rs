use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mismatch_mpc_cli::commands;
use mismatch_mpc_cli::config::{parse_vector, ExperimentConfig};
use mismatch_mpc_cli::error::CliError;
use mismatch_mpc_cli::output::to_json;
use mismatch_mpc_cli::scenario::ScenarioRegistry;

/// MPC under plant-model mismatch: closed-loop simulation, cost-difference
/// sweeps and stability certification.
#[derive(Debug, Parser)]
#[command(name = "mismatch-mpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-loop runs for each initial state and parameter value.
    Simulate(ExperimentArgs),
    /// Cost difference on an (x, theta) grid with contour plot.
    Sweep(ExperimentArgs),
    /// Invariance and descent certification on a level set.
    Certify(ExperimentArgs),
    /// Full figure set of a scenario.
    Reproduce {
        name: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the registered scenarios.
    Scenarios,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    solver: Option<String>,
    /// Comma-separated parameter vector; repeat for several values.
    #[arg(long, allow_hyphen_values = true)]
    theta: Vec<String>,
    /// Comma-separated initial state; repeat for several states.
    #[arg(long, allow_hyphen_values = true)]
    x0: Vec<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    random_runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig, CliError> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        let list = |v: &[String]| -> Result<Option<Vec<Vec<f64>>>, CliError> {
            if v.is_empty() {
                Ok(None)
            } else {
                v.iter().map(|s| parse_vector(s)).collect::<Result<Vec<_>, _>>().map(Some)
            }
        };
        let top = ExperimentConfig {
            scenario: self.scenario.clone(),
            solver: self.solver.clone(),
            theta: list(&self.theta)?,
            x0: list(&self.x0)?,
            rho: self.rho,
            delta: self.delta,
            k_max: self.k_max,
            random_runs: self.random_runs,
            out: self.out.clone(),
            seed: self.seed,
            ..Default::default()
        };
        Ok(base.merged(&top))
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let registry = ScenarioRegistry::default();
    match cli.command {
        Command::Simulate(args) => {
            let exp = args.config()?.resolve(&registry)?;
            to_json(&commands::simulate(&exp)?)
        }
        Command::Sweep(args) => {
            let exp = args.config()?.resolve(&registry)?;
            to_json(&commands::sweep(&exp)?)
        }
        Command::Certify(args) => {
            let exp = args.config()?.resolve(&registry)?;
            let cert = commands::certify(&exp)?;
            Ok(format!(
                "verdict {} (descent margin {}, empirical delta {})\n",
                cert.verdict,
                cert.report.descent_margin,
                cert.empirical_delta
            ))
        }
        Command::Reproduce { name, out, seed } => {
            let entries = commands::reproduce(&registry, &name, &out, seed)?;
            Ok(entries.iter().map(|e| format!("{}\t{}\n", e.figure, e.file)).collect())
        }
        Command::Scenarios => Ok(registry.names().iter().map(|n| format!("{n}\n")).collect()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
