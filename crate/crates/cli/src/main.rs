use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cts_lab::{CliError, ExperimentConfig, ExperimentKind};

/// Run a CTS tie-line market experiment.
#[derive(Debug, Parser)]
#[command(name = "cts-lab", version)]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    kind: ExperimentKind,
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random draw; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted `key=value` assignments applied on top of the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn execute(args: &Args) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.out.is_some() {
        cfg.out_dir = args.out.clone();
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let artifacts = cts_lab::run(args.kind, &cfg, &out)?;
    for f in &artifacts.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("CTS_LAB_LOG"))
        .target(env_logger::Target::Stderr)
        .init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let err = CliError::Config(e.to_string());
            eprintln!("{}", err.payload());
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.payload());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
