use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use isg_core::config::{parse_override, PipelineConfig};
use isg_core::pipeline::{run_subcommand, SUBCOMMANDS};

const WORKDIR_ENV: &str = "ISG_WORKDIR";

/// Image-to-gene-expression pipeline.
#[derive(Parser, Debug)]
#[command(name = "isg", version)]
struct Cli {
    /// One of: synth, tile, select, train-extractor, extract, train-predictor,
    /// predict, evaluate, gradcheck.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUBCOMMANDS))]
    subcommand: String,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Root seed; replaces `seed` from the file.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value`, applied after the file in order given.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("isg: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };

    let mut pairs = Vec::new();
    if let Ok(dir) = std::env::var(WORKDIR_ENV) {
        pairs.push(("work.dir".to_string(), dir));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".to_string(), seed.to_string()));
    }
    for o in &cli.overrides {
        match parse_override(o) {
            Ok(kv) => pairs.push(kv),
            Err(e) => return usage(e),
        }
    }
    let cfg = match PipelineConfig::load(&cli.config, &pairs) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };

    match run_subcommand(&cli.subcommand, &cfg) {
        Ok(msg) => {
            println!("{}: {msg}", cli.subcommand);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("isg {}: {e}", cli.subcommand);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
