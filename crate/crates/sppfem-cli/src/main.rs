//! `sppfem`: batch driver for anisotropic geometric flows of closed planar
//! curves.
//!
//! Exit codes: 0 completed horizon, 1 configuration or I/O error, 2 pinch-off
//! stop, 3 Newton divergence, 4 mesh degeneracy.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sppfem_cli::runner;

#[derive(Parser)]
#[command(name = "sppfem", version, about = "Structure-preserving parametric FEM for anisotropic curve flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one evolution from a config file (or a previously emitted
    /// manifest.toml, which re-runs bit-identically).
    Run {
        /// TOML run config or manifest.
        config: PathBuf,
        /// Redirect artifacts to this directory instead of the config's
        /// `output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a convergence study: every (alpha, level) cell plus a fine-mesh
    /// reference, in parallel over a bounded worker pool.
    Sweep {
        /// TOML study config.
        study: PathBuf,
    },
    /// Print the 21-node minimal stabilizer table for a density.
    Kmin {
        /// Density spec, e.g. `iso` or `mfold:m=3,beta=1/9`.
        density: String,
        /// Energy-matrix asymmetry parameter.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        alpha: f64,
    },
    /// Print the manifold distance between two curve CSV files.
    Distance {
        curve_a: PathBuf,
        curve_b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; anything else is a config
            // error in the exit-code contract (clap's default would be 2,
            // which this tool reserves for pinch-off).
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => runner::EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let outcome = match &cli.command {
        Command::Run { config, output_dir } => {
            runner::run_command(config, output_dir.as_deref())
        }
        Command::Sweep { study } => runner::sweep_command(study),
        Command::Kmin { density, alpha } => runner::kmin_command(density, *alpha),
        Command::Distance { curve_a, curve_b } => runner::distance_command(curve_a, curve_b),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(runner::EXIT_CONFIG as u8)
        }
    }
}
