//! `pecnn`: batch front end for phantom generation, DICOM conversion,
//! preprocessing, cross-validated training, evaluation and reporting.

mod commands;
mod logger;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pecnn::Error;

const AFTER_HELP: &str = "\
Manifest format: one case per line, tab-separated fields
  <relative path> <label 0|1> <seed or -> [<group trainval|test>]
Paths are relative to the manifest's directory. Lines starting with # are comments.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format error,
3 numeric failure.";

#[derive(Debug, Parser)]
#[command(name = "pecnn", version, about, after_help = AFTER_HELP)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a directory of DICOM slices (one series) to a NIfTI file.
    Convert { dicom_dir: PathBuf, out: PathBuf },
    /// Window, normalize and resize every case of the configured manifest.
    Preprocess {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Generate a synthetic phantom dataset with its manifest.
    Phantom {
        #[arg(long)]
        n_pos: usize,
        #[arg(long)]
        n_neg: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Cases held out as the test group.
        #[arg(long, default_value_t = 0)]
        test: usize,
        /// Grid extents, e.g. 64x64x32.
        #[arg(long, default_value = "64x64x32")]
        dims: String,
        /// Lesions per positive phantom.
        #[arg(long, default_value_t = pecnn::phantom::DEFAULT_LESIONS)]
        lesions: usize,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Run k-fold cross-validated training; writes one checkpoint per fold.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Score the manifest's test group with trained checkpoints.
    Evaluate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Evaluate this checkpoint only instead of every fold checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Tabulate evaluation results found under a directory.
    Report {
        results_dir: PathBuf,
        /// Which evaluation row to report: mean (fold average) or ensemble.
        #[arg(long, default_value = "mean")]
        scope: String,
        /// Output format.
        #[arg(long, value_enum, default_value_t = report::Format::Text)]
        format: report::Format,
    },
}

/// Usage and configuration errors exit 1, numeric failures 3, everything
/// else is a data or format problem.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> pecnn::Result<()> {
    match cli.command {
        Command::Convert { dicom_dir, out } => commands::convert(&dicom_dir, &out),
        Command::Preprocess { config, workers } => {
            commands::preprocess(&commands::load_config(config.as_deref())?, workers)
        }
        Command::Phantom {
            n_pos,
            n_neg,
            seed,
            out,
            test,
            dims,
            lesions,
            workers,
        } => commands::phantom(n_pos, n_neg, seed, &out, test, &dims, lesions, workers),
        Command::Train { config, workers } => {
            commands::train(&commands::load_config(config.as_deref())?, workers)
        }
        Command::Evaluate {
            config,
            checkpoint,
            workers,
        } => commands::evaluate(
            &commands::load_config(config.as_deref())?,
            checkpoint.as_deref(),
            workers,
        ),
        Command::Report {
            results_dir,
            scope,
            format,
        } => {
            let table = report::collect(&results_dir, &scope)?;
            print!("{}", report::render(&table, format));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    logger::init(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
