//! `hetgt`: configuration-driven experiments for heterogeneous graph tree
//! networks.
//!
//! Exit codes: 0 success, 1 i/o, 2 configuration, 3 data, 4 numerical
//! divergence, 5 failed gradient check.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use hetgt::graph::{FeatureFormat, SyntheticSpec};
use hetgt::Precision;

use config::{read_json, ExperimentConfig, Overrides};
use failure::Failure;

#[derive(Parser)]
#[command(
    name = "hetgt",
    version,
    about = "Train and evaluate heterogeneous graph tree networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repeated seeded runs of one model; writes runs.jsonl, summary.json,
    /// timing.json and the best run's checkpoint.
    Train(RunArgs),
    /// The configured model at several depths; writes depth_sweep.{json,csv}.
    DepthSweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated depths.
        #[arg(long, value_delimiter = ',', default_values_t = commands::PAPER_DEPTHS)]
        depths: Vec<usize>,
    },
    /// Aggregator variants of a tree model; writes ablation.{json,csv}.
    /// Uses depth 5 unless --depth is given.
    Ablation(RunArgs),
    /// Generates a synthetic dataset directory from a JSON spec.
    GenSynthetic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "csv", value_parser = parse_format)]
        format: FeatureFormat,
    },
    /// Finite-difference check of every op and model family.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let overrides = Overrides {
            seed: self.seed,
            runs: self.runs,
            depth: self.depth,
            out: self.out.clone(),
            precision: self.precision,
        };
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn parse_format(s: &str) -> Result<FeatureFormat, String> {
    match s {
        "csv" => Ok(FeatureFormat::Csv),
        "f32le" => Ok(FeatureFormat::F32le),
        other => Err(format!("unknown feature format `{other}` (expected csv or f32le)")),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => commands::train(&args.load()?),
        Command::DepthSweep { run, depths } => commands::depth_sweep(&run.load()?, &depths),
        Command::Ablation(args) => {
            let depth = args.depth.unwrap_or(commands::ABLATION_DEPTH);
            commands::ablation(&args.load()?, depth)
        }
        Command::GenSynthetic {
            config,
            out,
            seed,
            format,
        } => {
            let mut spec: SyntheticSpec = read_json(&config)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            commands::gen_synthetic(&spec, &out, format)
        }
        Command::Gradcheck {
            seed,
            out,
            inject_fault,
        } => commands::gradcheck(seed, inject_fault, out.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = run(cli) {
        eprintln!("hetgt: {f}");
        process::exit(f.code as i32);
    }
}
