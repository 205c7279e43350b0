use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Session;

#[derive(Parser, Debug)]
#[command(name = "polaron", version, about = "Polaron in a quantum crystal: microscopic model and Pekar limit")]
struct Cli {
    /// TOML configuration; omitted sections and keys take reference values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to POLARON_THREADS, then to the rayon default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run the invariant suite after the command and exit 1 on any violation.
    #[arg(long, global = true)]
    verify: bool,
    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Periodic ground state of the crystal.
    Crystal,
    /// Cell oscillation mode and E_per convergence over `cellmode.m_list`.
    Cellmode,
    /// Dielectric matrix at the two extraction supercells.
    Response,
    /// Self-consistent defect on one supercell.
    Defect(DefectArgs),
    /// Pekar ground state.
    Pekar(PekarArgs),
    /// Macroscopic limit of F_crys and the polaron energy asymptotics.
    Limit,
    /// Concentrating-defect counterexample.
    Counterexample,
    /// Every command in order.
    All,
}

#[derive(Args, Debug, Clone)]
pub struct DefectArgs {
    /// Supercell repetitions per axis.
    #[arg(long, default_value_t = 2)]
    pub supercell: usize,
    /// Width of the Gaussian defect.
    #[arg(long, default_value_t = 1.5)]
    pub sigma: f64,
    /// Charge of the Gaussian defect.
    #[arg(long, default_value_t = 0.1)]
    pub charge: f64,
}

impl Default for DefectArgs {
    fn default() -> Self {
        DefectArgs { supercell: 2, sigma: 1.5, charge: 0.1 }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct PekarArgs {
    /// `identity`, `reference`, a scalar, or a JSON dielectric matrix (overrides `pekar.eps`).
    #[arg(long)]
    pub eps: Option<String>,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("POLARON_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| format!("POLARON_THREADS={v:?} is not a thread count")),
        Err(_) => Ok(None),
    }
}

fn exit_code(e: &polaron::Error) -> u8 {
    use polaron::Error::*;
    match e {
        Config(_) | Io(_) | IncommensurateGrids(_) | InfeasibleSupercell { .. } => 2,
        e if e.is_nonconvergence() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::DEBUG } else { tracing::Level::INFO };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();

    match threads(cli.threads) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let mut session = match Session::open(cli.config.as_deref(), cli.out) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::Crystal => session.crystal(),
        Command::Cellmode => session.cellmode(),
        Command::Response => session.response(),
        Command::Defect(a) => session.defect(&a),
        Command::Pekar(a) => session.pekar(&a),
        Command::Limit => session.limit(),
        Command::Counterexample => session.counterexample(),
        Command::All => session.all(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    if cli.verify {
        match session.verify() {
            Ok(true) => {}
            Ok(false) => return ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(exit_code(&e));
            }
        }
    }
    ExitCode::SUCCESS
}
