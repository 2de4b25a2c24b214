mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "homcirc",
    version,
    about = "Homogeneous-variable analysis of smooth nonlinear circuits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Source {
    /// Netlist file.
    #[arg(long, conflicts_with = "builtin")]
    pub netlist: Option<PathBuf>,
    /// Built-in circuit name (vdp_lapshin, mlc_coupled, mc_flux, mc_charge, rc_linear, ...).
    #[arg(long)]
    pub builtin: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "homcirc-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dimensions, nondegeneracy, trees, Kirchhoff polynomial and splitting matrices.
    Analyze {
        #[command(flatten)]
        src: Source,
    },
    /// Integrate a scenario; writes trajectory CSV and events JSON.
    Simulate {
        #[command(flatten)]
        src: Source,
        /// TOML simulation config (defaults to the built-in scenario).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Proper-tree Kirchhoff polynomial, optionally dehomogenized.
    Polynomial {
        #[command(flatten)]
        src: Source,
        /// Comma list: `rK` divides by p_K, `gK` divides by q_K, `K=p:q` fixes values.
        #[arg(long)]
        dehomogenize: Option<String>,
        /// Use all spanning trees with every flag symbolic.
        #[arg(long)]
        all_trees: bool,
    },
    /// Equilibria, linearization pencils and eigenvalue loci along equilibrium lines.
    Equilibria {
        #[command(flatten)]
        src: Source,
        /// Number of random Newton seeds.
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the property suite on a circuit and its scenario.
    Validate {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { src } => commands::analyze(&src),
        Command::Simulate { src, config } => commands::simulate(&src, config.as_deref()),
        Command::Polynomial {
            src,
            dehomogenize,
            all_trees,
        } => commands::polynomial(&src, dehomogenize.as_deref(), all_trees),
        Command::Equilibria { src, grid, seed } => commands::equilibria(&src, grid, seed),
        Command::Validate { src, config, seed } => {
            commands::validate(&src, config.as_deref(), seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
