//! `ciss`: run, plot and compare class-incremental segmentation experiments.

mod compare;
mod config;
mod error;
mod plot;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "ciss", version, about = "Class-incremental segmentation experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every run of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace a config value, e.g. `train.seed=2`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
        overrides: Vec<String>,
        /// Number of runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Rerun and overwrite completed runs.
        #[arg(long)]
        force: bool,
    },
    /// Write SVG charts of a run directory.
    Plot { dir: PathBuf },
    /// Print a markdown table of final metrics, grouped by run name.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write the synthetic dataset of a config as PPM/PGM files.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run {
            config,
            overrides,
            jobs,
            force,
        } => {
            let cfg = config::load(&config, &overrides)?;
            let specs = config::expand(&cfg)?;
            info!("{} run(s), {} job(s)", specs.len(), jobs.max(1));
            let status = runner::run_all(&specs, jobs, force)?;
            let done = status.iter().filter(|s| **s == runner::RunStatus::Completed).count();
            info!("{done} run(s) completed, {} skipped", status.len() - done);
            Ok(())
        }
        Command::Plot { dir } => {
            for f in plot::plot_dir(&dir)? {
                info!("wrote {}", dir.join(f).display());
            }
            Ok(())
        }
        Command::Compare { dirs } => {
            print!("{}", compare::compare_dirs(&dirs)?);
            Ok(())
        }
        Command::Export {
            config,
            overrides,
            out,
        } => {
            let cfg = config::load(&config, &overrides)?;
            let pools = ciss::synthdata::generate(&cfg.data)?;
            ciss::synthdata::export_pools(&pools, &out).map_err(|e| CliError::from(e).context(&out.display().to_string()))?;
            info!("dataset written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CISS_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ciss: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
