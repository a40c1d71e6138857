mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input detected before any compute.
    #[error("{0}")]
    Validation(String),
    /// Failure while computing or writing results.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "timeperceiver", version, about = "Latent-bottleneck patch forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.d_model=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Validate and print the resolved config without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic series from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes best/last checkpoints and a JSON-lines history.
    Train {
        /// Continue from `<out>/last.json`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Standard forecasting metrics on the test split.
    Eval {
        #[command(flatten)]
        target: commands::Target,
        #[command(flatten)]
        common: Common,
    },
    /// Patch-masked imputation metrics on the test split.
    Impute {
        #[command(flatten)]
        target: commands::Target,
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare the variants of the `ablation` config section.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export encoder and decoder attention maps for test windows.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Count encoder attention cost across token counts.
    Profile {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, common } => commands::synth(&spec, &common),
        Command::Train { resume, common } => commands::train(resume, &common),
        Command::Eval { target, common } => commands::eval(&target, &common),
        Command::Impute { target, common } => commands::impute(&target, &common),
        Command::Ablate { common } => commands::ablate(&common),
        Command::Attn { checkpoint, common } => commands::attn(&checkpoint, &common),
        Command::Profile { common } => commands::profile(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
