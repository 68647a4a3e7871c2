use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vpsim::app::{self, AppError, Overrides};

#[derive(Parser)]
#[command(name = "vpsim", version, about = "Viscoelastic phase-separation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (default: runs/<manifest stem>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the noise seed of the initial condition.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Snapshot cadence in steps.
    #[arg(long, global = true)]
    snapshots: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a manifest and verify its diagnostics.
    Run { manifest: PathBuf },
    /// Repeat a run for a decreasing list of regularization cutoffs.
    SweepDelta { spec: PathBuf },
    /// Manufactured-solution convergence study.
    Mms { manifest: PathBuf },
    /// Re-check the acceptance gates of a finished run directory.
    Verify { dir: PathBuf },
}

fn dispatch(cli: &Cli) -> Result<(), AppError> {
    let ov = Overrides {
        seed: cli.seed,
        snapshots: cli.snapshots,
    };
    match &cli.command {
        Command::Run { manifest } => app::cli_run(manifest, cli.out.clone(), &ov, cli.quiet).map(drop),
        Command::SweepDelta { spec } => app::cli_sweep(spec, cli.out.clone(), &ov, cli.quiet).map(drop),
        Command::Mms { manifest } => app::cli_mms(manifest, cli.out.as_deref(), cli.quiet).map(drop),
        Command::Verify { dir } => app::cli_verify(dir).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
