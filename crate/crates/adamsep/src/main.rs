use std::path::PathBuf;
use std::process::ExitCode;

use adamsep::commands::execute;
use adamsep::config::parse_config;
use adamsep::parallel::{default_workers, WORKERS_ENV};
use clap::Parser;

/// Adam/RMSProp/SGD laboratory: run one of the configured experiments.
#[derive(Parser, Debug)]
#[command(name = "adamsep", version)]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Worker threads (outputs do not depend on it).
    #[arg(long, value_name = "K", env = WORKERS_ENV, value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    /// Base output directory; overrides `output.directory`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = cli.workers.map_or_else(default_workers, usize::from);
    let result = parse_config(&cli.config).and_then(|cfg| execute(&cfg, workers, cli.out.as_deref()));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.dir.display());
            eprintln!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("adamsep: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
