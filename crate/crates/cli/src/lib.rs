//! Command-line front end: `train`, `eval`, `ablate`, `generate`, `synth`.
//!
//! Exit codes: 0 success, 2 configuration, 3 data or file format,
//! 4 numerical divergence, 1 anything else.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{AblateArgs, EvalArgs, GenerateArgs, SynthArgs, TrainArgs};
pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dlsc", version, about = "Clustering with a jointly trained generator, encoder and critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a config file; writes a self-describing run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config value, `key=value` or `section.key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory (default `$DLSC_OUT/<config>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write per-point embeddings.
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Cluster a labelled dataset with a checkpoint and report ACC/NMI/ARI.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset config (default: the run directory's config.toml).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the full objective and every single-term removal.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample points of one cluster from a trained generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cluster: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a labelled Gaussian-mixture dataset as CSV.
    Synth {
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        per_cluster: usize,
        #[arg(long, default_value_t = 6.0)]
        mean_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            resume,
            embeddings,
            quiet,
        } => {
            let r = commands::cmd_train(&TrainArgs {
                config,
                overrides,
                out,
                resume,
                embeddings,
                quiet,
            })?;
            println!("run directory: {}", r.dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            overrides,
            report,
        } => {
            commands::cmd_eval(&EvalArgs {
                checkpoint,
                config,
                overrides,
                report,
            })?;
        }
        Command::Ablate { config, overrides, out } => {
            commands::cmd_ablate(&AblateArgs { config, overrides, out })?;
        }
        Command::Generate {
            checkpoint,
            cluster,
            count,
            seed,
            out,
        } => {
            commands::cmd_generate(&GenerateArgs {
                checkpoint,
                cluster,
                count,
                seed,
                out,
            })?;
        }
        Command::Synth {
            clusters,
            dim,
            per_cluster,
            mean_scale,
            std,
            seed,
            out,
        } => {
            let n = commands::cmd_synth(&SynthArgs {
                clusters,
                dim,
                per_cluster,
                mean_scale,
                std,
                seed,
                out,
            })?;
            println!("wrote {n} rows");
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
