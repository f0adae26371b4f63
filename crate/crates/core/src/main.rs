use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfg_charge::cli::{self, SimulateArgs, SolveArgs, VerifyArgs};
use mfg_charge::config::SolverKind;

#[derive(Parser)]
#[command(name = "mfg-charge", version, about = "Mean field game battery charging solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the equilibrium and write equilibrium.csv and diagnostics.json.
    Solve {
        config: PathBuf,
        /// affine, fixedpoint or variational.
        #[arg(long)]
        solver: Option<SolverKind>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set price.c1=2`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Solve, simulate the population and write population.csv.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-agent paths in long format.
        #[arg(long)]
        agents_csv: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the invariant suites.
    Verify {
        config: PathBuf,
        /// Skip the Monte Carlo checks.
        #[arg(long)]
        quick: bool,
        /// Shift s₂ before the residual checks (fault injection).
        #[arg(long)]
        perturb_s: Option<f64>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(command: Command) -> mfg_charge::Result<i32> {
    match command {
        Command::Solve {
            config,
            solver,
            out,
            overrides,
        } => {
            let args = SolveArgs {
                config,
                solver,
                out,
                overrides,
            };
            cli::print(&cli::cmd_solve(&args)?);
            Ok(cli::EXIT_OK)
        }
        Command::Simulate {
            config,
            out,
            agents_csv,
            overrides,
        } => {
            let args = SimulateArgs {
                config,
                out,
                agents_csv,
                overrides,
            };
            cli::print(&cli::cmd_simulate(&args)?);
            Ok(cli::EXIT_OK)
        }
        Command::Verify {
            config,
            quick,
            perturb_s,
            overrides,
        } => {
            let args = VerifyArgs {
                config,
                quick,
                perturb_s,
                overrides,
            };
            let report = cli::cmd_verify(&args)?;
            cli::print(&report.to_string());
            Ok(if report.passed() { cli::EXIT_OK } else { cli::EXIT_VERIFY })
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let code = match run(args.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            cli::exit_code(&err)
        }
    };
    ExitCode::from(code as u8)
}
