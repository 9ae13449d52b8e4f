use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use current_rdm::config::RunConfig;
use current_rdm::run::{self, Command, RunError, RunOptions};

#[derive(Parser)]
#[command(
    name = "current-rdm",
    version,
    about = "Construct and verify current-reproducing 1-RDMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the kernels and write samples plus admissibility values
    Construct(Args),
    /// Run the full check suite
    Verify(Args),
    /// Dense and matrix-free spectra of P, Q and D
    Spectrum(Args),
    /// Kinetic-energy densities, functionals and bounds
    Functionals(Args),
    /// Refinement ladders in step size, quadrature order, grid and epsilon
    Convergence(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML run configuration
    config: PathBuf,
    /// Directory for the run folder (default: output.dir from the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the timestamp out of the report so reruns are byte-identical
    #[arg(long)]
    no_timestamp: bool,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Construct(a) => (Command::Construct, a),
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Spectrum(a) => (Command::Spectrum, a),
        Cmd::Functionals(a) => (Command::Functionals, a),
        Cmd::Convergence(a) => (Command::Convergence, a),
    };
    let config = match RunConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let opts = RunOptions {
        out_dir: args.out,
        timestamp: !args.no_timestamp,
        dry_run: false,
    };
    let outcome = match run::execute(cmd, &config, &opts) {
        Ok(o) => o,
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CHECK_FAILED);
        }
    };
    let summary = &outcome.report.summary;
    if let Some(dir) = &outcome.run_dir {
        println!("report: {}", dir.join("report.json").display());
    }
    println!(
        "{}: {} passed, {} failed",
        cmd.name(),
        summary.passed,
        summary.failed
    );
    if summary.failed == 0 {
        return ExitCode::SUCCESS;
    }
    for name in &summary.failing {
        eprintln!("FAILED {name}");
    }
    ExitCode::from(EXIT_CHECK_FAILED)
}
