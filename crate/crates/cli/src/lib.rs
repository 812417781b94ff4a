//! Experiment harness behind the `mam` binary.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::SyntheticArgs;
use config::CommonArgs;

#[derive(Debug, Parser)]
#[command(
    name = "mam",
    version,
    about = "Mutually aligned cross-modal diffusion for paired time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset directory.
    MakeSynthetic {
        /// coupled, coupled_clean, coupled_lossy, coupled_identity or lorenz.
        #[arg(long, default_value = "coupled")]
        system: String,
        #[arg(long, default_value_t = 192)]
        n_sequences: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
    },
    /// Train both denoisers on every configured fold.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue the run in this directory from its checkpoints; `--epochs`
        /// then counts additional epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained run: metric reports, summary table and plots.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Override the run's data source.
        #[arg(long)]
        data: Option<String>,
        /// Also compute the train-on-generated forecasting score.
        #[arg(long)]
        predictive: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the four loss-ablation variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Linear and nonlinear probes of trained runs' encoder latents.
    Probe {
        /// Run directory; repeat to compare alignment methods.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> mam_core::Result<()> {
    match cli.command {
        Command::MakeSynthetic {
            system,
            n_sequences,
            length,
            seed,
            out,
        } => {
            let args = SyntheticArgs {
                system,
                n_sequences,
                length,
                seed,
            };
            commands::make_synthetic(&args, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { common, resume } => {
            let out = commands::train(&common, resume.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            run,
            data,
            predictive,
            out,
        } => {
            let reports = commands::evaluate(&run, data.as_deref(), predictive, out.as_deref())?;
            print!(
                "{}",
                mam_core::metrics::markdown_table(&mam_core::metrics::aggregate(&reports))
            );
        }
        Command::Ablate { common } => {
            let rows = commands::ablate(&common)?;
            print!("{}", commands::ablation_markdown(&rows));
        }
        Command::Probe { runs, out, seed } => {
            let out = out.unwrap_or_else(|| runs[0].join("probe"));
            let rows = commands::probe_runs(&runs, &out, seed)?;
            print!("{}", commands::probe_markdown(&rows));
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code:
/// 0 success, 2 configuration or usage error, 3 data error, 4 numerical
/// failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
