use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use claimgraph_cli::stages::{ModelKind, Runner};
use claimgraph_cli::{CliError, Overrides, PipelineConfig};

/// Claims-data risk prediction pipeline: cohorts, matching, graph attention
/// model, tree baselines, evaluation and relation importance.
#[derive(Debug, Parser)]
#[command(name = "claimgraph", version)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Restrict per-scenario stages to one scenario.
    #[arg(long, global = true, value_name = "1|2|3|all", value_parser = parse_scenario)]
    scenario: Option<Vec<u8>>,

    /// Override the global seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Cap worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset from the [generator] section.
    Generate,
    /// Resolve the code map and report mapping coverage.
    Ingest,
    /// Build the labeled cohort per scenario.
    Cohort,
    /// Hold out the test split and build the matched training cohort.
    Match,
    /// Train one model family on the matched and subset cohorts.
    Train {
        #[arg(value_enum)]
        model: ModelKind,
    },
    /// Score the holdout and write results.csv.
    Evaluate,
    /// Relation importance from the matched-cohort model.
    Explain,
    /// Every stage for every configured scenario.
    RunAll,
}

fn parse_scenario(s: &str) -> Result<Vec<u8>, String> {
    match s {
        "all" => Ok(vec![1, 2, 3]),
        "1" | "2" | "3" => Ok(vec![s.parse().unwrap()]),
        _ => Err(format!("expected 1, 2, 3 or all, found '{s}'")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli
        .config
        .ok_or_else(|| CliError::Config(vec!["--config PATH is required".into()]))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config(vec!["--threads must be positive".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(vec![format!("--threads: {e}")]))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        scenarios: cli.scenario,
        output_dir: cli.output,
    };
    let runner = Runner::new(PipelineConfig::load(&config, &overrides)?);
    let scenarios = runner.cfg.scenarios.clone();
    match cli.command {
        Command::Generate => runner.generate(),
        Command::Ingest => runner.ingest(),
        Command::Cohort => scenarios.iter().try_for_each(|&s| runner.cohort(s)),
        Command::Match => scenarios.iter().try_for_each(|&s| runner.match_stage(s)),
        Command::Train { model } => scenarios.iter().try_for_each(|&s| runner.train(s, model)),
        Command::Evaluate => runner.evaluate().map(drop),
        Command::Explain => scenarios.iter().try_for_each(|&s| runner.explain(s)),
        Command::RunAll => runner.run_all().map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
