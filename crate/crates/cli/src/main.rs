use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use gridloc::{cmd_prepare, cmd_report, cmd_run, cmd_score, cmd_simulate, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "gridloc",
    version,
    about = "Grid-cell localization benchmark for chest radiographs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render grid-overlaid images.
    Prepare(Common),
    /// Query every configured backend, resuming from the response cache.
    Run(Common),
    /// Score cached responses against the masks.
    Score(Common),
    /// Write tables, review worksheets and heatmaps.
    Report(Common),
    /// Whole pipeline against simulated backends, offline.
    Simulate(Common),
}

fn print<T: Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        // A closed stdout is not worth a panic.
        Ok(s) => drop(writeln!(std::io::stdout().lock(), "{s}")),
        Err(e) => log::error!("cannot serialise summary: {e}"),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (Command::Prepare(c) | Command::Run(c) | Command::Score(c) | Command::Report(c) | Command::Simulate(c)) =
        &cli.command;
    let overrides = Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
    };
    let cfg = RunConfig::load(&c.config, &overrides)?;
    match cli.command {
        Command::Prepare(_) => print(&cmd_prepare(&cfg)?),
        Command::Run(_) => {
            let summary = cmd_run(&cfg)?;
            print(&summary);
            return Ok(summary.failed().is_empty());
        }
        Command::Score(_) => print(&cmd_score(&cfg)?),
        Command::Report(_) => print(&cmd_report(&cfg)?),
        Command::Simulate(_) => print(&cmd_simulate(&cfg)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            print(&serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
