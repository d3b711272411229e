//! `gatdst` command-line driver: synthetic data, training, evaluation,
//! dependency analysis and built-in self tests.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, missing files or malformed data. Exit code 1.
    #[error("{0}")]
    Input(String),
    /// A broken internal invariant. Exit code 2.
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<gatdst::Error> for CliError {
    fn from(e: gatdst::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gatdst", version, about = "Graph-attention dialogue state tracking runs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative paths in the configuration resolve against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override one configuration key, e.g. `--set train.lr_lm=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ontology and corpus with train/valid/test splits.
    Synth,
    /// Train a tracker and keep the checkpoint with the best validation loss.
    Train,
    /// Predict every test turn and write metric tables and a prediction dump.
    Eval {
        /// Score the gold annotations themselves instead of a checkpoint.
        #[arg(long)]
        gold: bool,
    },
    /// Jaccard dependency analysis of a model dump against a baseline dump.
    Analyze,
    /// Run the gradient, oracle, round-trip and metric verification suites.
    Selftest {
        /// Negate the attention score in the implementation under test; every
        /// affected suite must then fail.
        #[arg(long)]
        inject_sign_flip: bool,
    },
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if cfg.graph.graph_type == gatdst::graph::GraphType::NoGraph {
        cfg.graph.layers = 0;
        cfg.graph.heads = 0;
        cfg.graph.hops = 0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Selftest { inject_sign_flip } = cli.command {
        return commands::selftest(inject_sign_flip);
    }
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Eval { gold } => commands::eval(&cfg, out, gold),
        Command::Analyze => commands::analyze(&cfg, out),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
        Command::Selftest { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
