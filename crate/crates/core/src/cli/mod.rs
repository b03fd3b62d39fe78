//! Command-line front end: `segfed <subcommand>`.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    ablation_methods, evaluate_checkpoint, execute_run, Method, RunArtifacts, Split, ABLATION_HEADER, SWEEP_HEADER, UPLOAD_RATIOS,
};
pub use config::{apply_override, find_key_line, load_config, parse_config, DataConfig, ExperimentConfig, OUTPUT_ROOT_ENV};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "segfed", version, about = "Two-branch federated segmentation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-path override, e.g. `federation.upload_ratio=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; replaces `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Client worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Suppress per-round progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Setup plus all rounds; writes ledger, summary, report and checkpoints.
    Run(ConfigArgs),
    /// The four-row module ablation over seeds and scenarios.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Seeds used are `seed, seed+1, ..`.
        #[arg(long, default_value_t = 3)]
        n_seeds: usize,
        /// Comma-separated presets; defaults to the config's preset.
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<crate::synthdata::Preset>,
    },
    /// Exemplar upload ratios 0.25, 0.5, 0.75 and 1.0.
    UploadSweep {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        n_seeds: usize,
    },
    /// Re-evaluates a saved checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Writes the configured federated dataset as flat binaries plus a manifest.
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Samples per-pixel global-branch features for external visualisation.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        client: u32,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Which split of the client's data to sample from.
        #[arg(long, value_enum, default_value_t = commands::Split::Val)]
        split: commands::Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run_from(std::env::args_os())
}
