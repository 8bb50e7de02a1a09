use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairdiff::harness::{run_command, Command, ExperimentSpec, RunOptions};

#[derive(Parser)]
#[command(
    name = "fairdiff",
    version,
    about = "Distribution-guided fair sampling on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment spec (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Comma-separated run seeds, e.g. `0,1,2`; overrides the spec.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output root; overrides the spec.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: Option<u64>,
    /// Rebuild every stage instead of reading `<out>/cache`.
    #[arg(long, global = true)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the world file and a sample dataset.
    World,
    /// Train the denoiser and write its checkpoint and loss curve.
    TrainDenoiser,
    /// Write the h-space datasets of the configured attributes.
    Invert,
    /// Train h-space banks and evaluation classifiers.
    TrainBanks,
    /// Generate with every configured strategy and keep the points.
    Sample,
    /// Score a points file (`x_1..x_d` columns).
    Evaluate {
        input: PathBuf,
    },
    /// Compare the configured strategies.
    Pipeline,
    AblateGamma,
    AblateBatch,
    /// Two-attribute balancing in marginal and subgroup mode.
    Multi,
    /// Minority augmentation for an imbalanced classifier.
    Downstream,
    /// h-bank versus clean classifier accuracy against training size.
    DataEfficiency,
    /// SVG charts from existing sweep tables.
    Plot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k as usize).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let spec = match &cli.spec {
        Some(p) => ExperimentSpec::load(p),
        None => Ok(ExperimentSpec::default()),
    };
    let spec = match spec {
        Ok(s) => s,
        Err(e) => {
            eprintln!("spec error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut opts = RunOptions {
        seeds: cli.seed,
        out: cli.out,
        input: None,
        no_cache: cli.no_cache,
    };
    let command = match cli.command {
        Cmd::World => Command::World,
        Cmd::TrainDenoiser => Command::TrainDenoiser,
        Cmd::Invert => Command::Invert,
        Cmd::TrainBanks => Command::TrainBanks,
        Cmd::Sample => Command::Sample,
        Cmd::Evaluate { input } => {
            opts.input = Some(input);
            Command::Evaluate
        }
        Cmd::Pipeline => Command::Pipeline,
        Cmd::AblateGamma => Command::AblateGamma,
        Cmd::AblateBatch => Command::AblateBatch,
        Cmd::Multi => Command::Multi,
        Cmd::Downstream => Command::Downstream,
        Cmd::DataEfficiency => Command::DataEfficiency,
        Cmd::Plot => Command::Plot,
    };
    match run_command(command, &spec, &opts) {
        Ok(record) => {
            for s in &record.stages {
                eprintln!(
                    "stage {:<16} {} {}",
                    s.stage,
                    &s.key[..12],
                    if s.cache_hit { "cached" } else { "built" }
                );
            }
            if !record.rows.is_empty() {
                print!("{}", record.table().summary_csv());
            }
            eprintln!("{} done in {:.1}s", record.run_id, record.wall_clock_secs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
