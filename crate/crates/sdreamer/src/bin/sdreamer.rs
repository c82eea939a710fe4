//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error (clap's own parse failures also exit 2).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdreamer::run::{cmd_eval, cmd_infer, cmd_inspect, cmd_synth, cmd_train};

#[derive(Parser)]
#[command(
    name = "sdreamer",
    about = "Sleep staging with mixture-of-modality-experts transformers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (one container per subject).
    Synth {
        /// Number of subjects to generate.
        #[arg(long)]
        subjects: usize,
        /// Seconds of signal per subject.
        #[arg(long)]
        seconds: usize,
        /// Master seed; each subject derives its own stream from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory to write subject containers into.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Stage transition matrix, 9 comma-separated row-major values.
        #[arg(long, value_name = "M")]
        transition_matrix: Option<String>,
    },
    /// Train a model from a config file, writing logs and a checkpoint.
    Train {
        /// Path to a `key = value` run configuration.
        config: PathBuf,
        /// Override a config key (repeatable); flags beat the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset and print the report.
    Eval {
        checkpoint: PathBuf,
        /// Dataset directory holding subject containers.
        data: PathBuf,
        /// Pathway to evaluate: auto, eeg, emg, or mix.
        #[arg(long, default_value = "auto")]
        pathway: String,
        /// Comma-separated subject names (default: every container found).
        #[arg(long)]
        subjects: Option<String>,
    },
    /// Predict stages for a recording, one record per second on stdout.
    Infer {
        checkpoint: PathBuf,
        /// A subject container, or a directory of containers.
        input: PathBuf,
        /// Include the final-layer class-token embedding in each record.
        #[arg(long)]
        emit_embeddings: bool,
    },
    /// Print a checkpoint's metadata and embedded config.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { subjects, seconds, seed, out_dir, transition_matrix } => {
            cmd_synth(*subjects, *seconds, *seed, out_dir, transition_matrix.as_deref())
        }
        Command::Train { config, overrides } => cmd_train(config, overrides),
        Command::Eval { checkpoint, data, pathway, subjects } => {
            cmd_eval(checkpoint, data, pathway, subjects.as_deref())
        }
        Command::Infer { checkpoint, input, emit_embeddings } => {
            cmd_infer(checkpoint, input, *emit_embeddings)
        }
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
