use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use geolevels_cli::{run, Command, Invocation};

#[derive(Parser)]
#[command(
    name = "geolevels",
    version,
    about = "Multi-level socioeconomic mapping experiments on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a world dataset from the configured spec
    Gen(Common),
    /// Train the pipeline on every district and write a model checkpoint
    Train(Common),
    /// Predict district indicators with a trained checkpoint
    Predict(Common),
    /// Repeated-split out-of-sample evaluation
    Evaluate(Common),
    /// Augmentation robustness across train fractions
    Robustness(Common),
    /// Cross-world transfer grid
    Transfer(Common),
    /// Within-district and national inequality summaries
    Inequality(Common),
    /// Rank-size power-law fit of district values
    Zipf(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Master seed (overrides the config's)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, write-once per run (overrides the config's)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Gen(c) => (Command::Gen, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Predict(c) => (Command::Predict, c),
        Sub::Evaluate(c) => (Command::Evaluate, c),
        Sub::Robustness(c) => (Command::Robustness, c),
        Sub::Transfer(c) => (Command::Transfer, c),
        Sub::Inequality(c) => (Command::Inequality, c),
        Sub::Zipf(c) => (Command::Zipf, c),
    };
    let invocation = Invocation {
        command,
        config_path: common.config,
        seed: common.seed,
        out: common.out,
    };
    match run(&invocation) {
        Ok(line) => println!("{line}"),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
