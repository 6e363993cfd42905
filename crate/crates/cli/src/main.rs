//! `sepolab` command-line entry point.
//!
//! Every failure is printed as one JSON object on stderr and mapped to the
//! exit code contract in [`error::Class`].

mod agent;
mod bench;
mod common;
mod datagen;
mod error;
mod reflect;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "sepolab",
    version,
    about = "Editor/evaluator policy optimization workbench"
)]
struct Cli {
    /// Worker threads for data-parallel stages; all cores when absent.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Single editing episode.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Dual-loop training on the toy environment.
    #[command(subcommand)]
    Sepo(SepoCmd),
    /// Reflection trajectories from training candidates.
    #[command(subcommand)]
    Reflect(ReflectCmd),
    /// Staged data generation.
    #[command(subcommand)]
    Datagen(DatagenCmd),
    /// Benchmark runs over a manifest of samples.
    #[command(subcommand)]
    Bench(bench::BenchCmd),
    /// Comparisons between benchmark results.
    #[command(subcommand)]
    Metrics(MetricsCmd),
}

#[derive(Debug, Subcommand)]
enum AgentCmd {
    Run(agent::AgentRun),
}

#[derive(Debug, Subcommand)]
enum SepoCmd {
    Train(train::SepoTrain),
}

#[derive(Debug, Subcommand)]
enum ReflectCmd {
    Export(reflect::ReflectExport),
}

#[derive(Debug, Subcommand)]
enum DatagenCmd {
    Run(datagen::DatagenRun),
}

#[derive(Debug, Subcommand)]
enum MetricsCmd {
    /// Win and positive rates of one bench CSV against another.
    Compare(bench::MetricsCompare),
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::usage("config", "--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::runtime("threads", e))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Agent(AgentCmd::Run(c)) => agent::run(c, seed),
        Command::Sepo(SepoCmd::Train(c)) => train::run(c, cli.seed),
        Command::Reflect(ReflectCmd::Export(c)) => reflect::run(c, seed),
        Command::Datagen(DatagenCmd::Run(c)) => datagen::run(c, seed),
        Command::Bench(c) => bench::run(c, seed),
        Command::Metrics(MetricsCmd::Compare(c)) => bench::compare(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return CliError::usage("usage", e.render().to_string().trim_end()).report(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
