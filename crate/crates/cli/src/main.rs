//! `ccvc`: train, evaluate, ablate and report.

mod ablate;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccvc",
    version,
    about = "Two-branch semi-supervised segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds a config.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set epochs=N`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct OutArgs {
    /// Run directory; defaults to a name under `$CCVC_OUT_ROOT` (or `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Re-run the config recorded in a previous run's manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `val`, `train` (labelled training scenes) or `all`.
        #[arg(long, default_value = "val")]
        split: String,
        /// Evaluate on `DIR/images` + `DIR/labels` instead of the run's data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run the component ladder and print a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Render curves and a summary table from a metrics log.
    Report {
        /// A `metrics.jsonl` file or a run directory containing one.
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the metrics file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation, config or missing input: exit 2.
    Usage(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(String),
}

impl From<ccvc::CcvcError> for Failure {
    fn from(e: ccvc::CcvcError) -> Self {
        use ccvc::CcvcError::*;
        match e {
            Config { .. } | Parameter { .. } | MissingLabel { .. } | LabelOutOfRange { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            cfg,
            out,
            manifest,
            resume,
        } => run::train(&cfg, &out, manifest.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            data_dir,
        } => run::eval(&checkpoint, &split, data_dir.as_deref()),
        Command::Ablate { cfg, out } => ablate::ablate(&cfg, &out),
        Command::Report { metrics, out } => run::report(&metrics, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).collect::<Vec<_>>().join(" ")
}
