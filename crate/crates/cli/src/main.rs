use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sidlab::graph::save_graphs;
use sidlab::harness::{
    load_artifacts, run_ablation, sample_cell, save_artifacts, save_csv, train_all, ExperimentConfig, SamplerChoice,
};
use sidlab::prob::RngStream;
use sidlab::verify::{self, VerifyOptions, CRITERIA};

#[derive(Parser)]
#[command(name = "sidlab", version, about = "Iterative denoising samplers for toy graph families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let config = ExperimentConfig::load(&self.config)?;
        Ok(match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and train the configured models.
    Train(Common),
    /// Draw samples from trained models into a graph file.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_parser = parse_sampler)]
        sampler: SamplerChoice,
        #[arg(long)]
        nfe: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Run the sampler x NFE grid and write ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Reuse models from this directory instead of training.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run the acceptance checks.
    Verify {
        /// Criteria to run, e.g. `--only 1,2,5`; all by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replaces the bundled config of the validity-ordering check.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_sampler(s: &str) -> Result<SamplerChoice, String> {
    s.parse().map_err(|e: sidlab::Error| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let config = common.load()?;
            create_dir(&common.out)?;
            let artifacts = train_all(&config)?;
            save_artifacts(&artifacts, &common.out)?;
            info!("models written to {}", common.out.display());
        }
        Command::Sample { common, models, sampler, nfe, count } => {
            let config = common.load()?;
            if count == 0 || nfe == 0 {
                bail!("--count and --nfe must be at least 1");
            }
            let artifacts = load_artifacts(&config, &models)?;
            let stream = RngStream::new(config.seed, 5);
            let samples = sample_cell(&config, &artifacts, sampler, nfe, count, &stream)?;
            create_dir(&common.out)?;
            let path = common.out.join(format!("samples_{}_{nfe}.jsonl", sampler.name()));
            save_graphs(&path, &samples)?;
            info!("{count} samples written to {}", path.display());
        }
        Command::Ablate { common, models } => {
            let config = common.load()?;
            create_dir(&common.out)?;
            let artifacts = match models {
                Some(dir) => load_artifacts(&config, &dir)?,
                None => {
                    let a = train_all(&config)?;
                    save_artifacts(&a, &common.out)?;
                    a
                }
            };
            let rows = run_ablation(&config, &artifacts)?;
            let path = common.out.join("ablation.csv");
            save_csv(&path, &rows)?;
            for row in &rows {
                println!("{}", row.csv_line());
            }
            info!("ablation written to {}", path.display());
        }
        Command::Verify { only, seed, config } => {
            let mut opts = VerifyOptions::new(seed)?;
            if let Some(path) = config {
                opts.ordering = ExperimentConfig::load(&path)?;
            }
            let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|(id, _)| *id).collect() } else { only };
            let mut all = true;
            for id in ids {
                let report = verify::run(id, &opts)?;
                println!("{}", report.line());
                all &= report.passed;
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
