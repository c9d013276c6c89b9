//! `irispad`: synthetic data, quality audit, per-split training, evaluation
//! and explanation renders for post-mortem iris liveness detection.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::CommonFlags;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<irispad::Error> for CliError {
    fn from(e: irispad::Error) -> Self {
        let (code, category) = match &e {
            irispad::Error::Divergence { .. } => (EXIT_DIVERGENCE, "training divergence"),
            irispad::Error::Consistency(_) => (EXIT_INVARIANT, "invariant breach"),
            _ => (EXIT_CONFIG, "configuration/file error"),
        };
        CliError {
            code,
            message: format!("{category}: {e}"),
        }
    }
}

impl From<String> for CliError {
    fn from(message: String) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: format!("configuration/file error: {message}"),
        }
    }
}

impl From<&str> for CliError {
    fn from(message: &str) -> Self {
        message.to_string().into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "irispad", version, about = "Post-mortem iris presentation attack detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class corpus with a manifest.
    Synth(commands::SynthArgs),
    /// Image-quality covariates per class and live vs post-mortem rank-sum tests.
    Quality(commands::QualityArgs),
    /// Pretrain a backbone on procedural textures and export it as safetensors.
    Pretrain(commands::PretrainArgs),
    /// Draw subject-disjoint splits; train, save and score one model per split.
    Train(CommonFlags),
    /// Aggregate scored samples into accuracy, ROC/AUC, APCER/BPCER and time bins.
    Evaluate(commands::EvaluateArgs),
    /// Grad-CAM, guided backpropagation and four-panel renders for chosen samples.
    Explain(commands::ExplainArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Quality(a) => commands::quality(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Explain(a) => commands::explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irispad: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
