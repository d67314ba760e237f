//! `dmsg` — synthesize datasets, run class-incremental experiments, and
//! summarize finished runs.
//!
//! Exit codes are a stable contract for scripts and CI: 0 on success, 2 for
//! usage, configuration, and dataset problems, 3 when training diverges.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmsg_core::trainer::TrainerError;

mod manifest;
mod report;
mod run;
mod synth;

#[derive(Parser, Debug)]
#[command(name = "dmsg", version, about = "Class-incremental learning on growing graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic growing-graph dataset directory.
    Synth(synth::SynthArgs),
    /// Train one mode over the task sequence and write run artifacts.
    ///
    /// Prints the run directory as the final line of stdout.
    Run(run::RunArgs),
    /// Summarize finished runs: a table on stdout, curve and heat-map data
    /// files on disk.
    Report(report::ReportArgs),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn main() -> ExitCode {
    // clap itself exits with 2 on usage errors, matching the contract.
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => synth::cmd_synth(&args),
        Command::Run(args) => run::cmd_run(&args),
        Command::Report(args) => report::cmd_report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(TrainerError::Diverged { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_CONFIG })
        }
    }
}

/// Shared flag type: directories that must exist before the command runs.
pub(crate) fn existing_dir(value: &str) -> Result<PathBuf, String> {
    let path = PathBuf::from(value);
    if path.is_dir() {
        Ok(path)
    } else {
        Err(format!("{value}: not a directory"))
    }
}
