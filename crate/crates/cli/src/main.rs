mod args;
mod commands;
mod error;

use clap::Parser;

use args::{Cli, Command, FileConfig};
use commands::Context;
use error::CliError;

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        quiet: cli.quiet || file.quiet.unwrap_or(false),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a.overlay(file.simulate)),
        Command::Contaminate(a) => commands::contaminate(&ctx, a.overlay(file.contaminate)),
        Command::Fit(a) => commands::fit(&ctx, a.overlay(file.fit)),
        Command::Diagnose(a) => commands::diagnose(&ctx, a.overlay(file.diagnose)),
        Command::Plot(a) => commands::plot(&ctx, a.overlay(file.plot)),
        Command::Study(a) => commands::study(&ctx, a.overlay(file.study)),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("pmelm: {e}");
        std::process::exit(e.code());
    }
}
