//! `qaplaus`: ingest, synthesize, train, evaluate and clean QA corpora.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RawConfig, RunConfig, ENV_CONFIG};

#[derive(Parser)]
#[command(
    name = "qaplaus",
    version,
    about = "Plausibility scoring and cleaning of question/response corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines. Defaults to $QAPLAUS_CONFIG when set.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs; `qaplaus config --dump` lists every key.
    #[arg(
        value_name = "--KEY VALUE",
        trailing_var_arg = true,
        allow_hyphen_values = true,
        num_args = 0..
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, where-filter, span-cap and split a corpus into train/val/test.
    Ingest(Common),
    /// Write a synthetic labeled corpus.
    Synth(Common),
    /// Train one model on a task set.
    Train(Common),
    /// Train and test the five task-set variants.
    Grid(Common),
    /// Score a checkpoint on a labeled corpus.
    Eval(Common),
    /// Run the two-stage pipeline over a corpus and keep plausible pairs.
    Clean(Common),
    /// Run the two-stage pipeline on one question and response.
    Predict(Common),
    /// Print the effective configuration.
    Config {
        /// Print every key with its value (the default behavior).
        #[arg(long)]
        dump: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// An error together with its exit code class.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut raw = RawConfig::default();
    let file = common.config.clone().or_else(|| {
        std::env::var_os(ENV_CONFIG)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    });
    if let Some(path) = file {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::Usage(anyhow::anyhow!("config file {}: {e}", path.display())))?;
        raw.apply_text(&text, &path.display().to_string()).usage()?;
    }
    raw.apply_overrides(&common.overrides).usage()?;
    RunConfig::from_raw(raw).usage()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest(c) => commands::ingest(&load_config(&c)?),
        Command::Synth(c) => commands::synth(&load_config(&c)?),
        Command::Train(c) => commands::train(&load_config(&c)?),
        Command::Grid(c) => commands::grid(&load_config(&c)?),
        Command::Eval(c) => commands::eval(&load_config(&c)?),
        Command::Clean(c) => commands::clean(&load_config(&c)?),
        Command::Predict(c) => commands::predict(&load_config(&c)?),
        Command::Config { common, .. } => {
            commands::emit(&load_config(&common)?.raw.dump());
            Ok(())
        }
    }
}

/// The error chain joined by `: `, skipping causes the message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.is_empty() {
            msg = text;
        } else if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {}", describe(e));
            ExitCode::from(f.code())
        }
    }
}
