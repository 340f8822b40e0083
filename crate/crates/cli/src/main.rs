use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sbr_core::pipeline::{write_simulated_project, Pipeline, PipelineConfig, RunRequest, Stage, StageStatus};
use sbr_core::sampler::SamplerConfig;
use sbr_core::simulate::{simulate_model_data, SimConfig};

/// National stillbirth rate estimation.
#[derive(Parser, Debug)]
#[command(name = "sbr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Reruns this stage even when its manifest is current (repeatable).
    #[arg(long, value_name = "STAGE")]
    stage: Vec<Stage>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Definitional adjustments and adjusted observations.
    Adjust(RunArgs),
    /// Ratio screening of adjusted observations.
    Screen(RunArgs),
    /// Horseshoe fit, covariate subsetting and the final fit.
    Fit(RunArgs),
    /// Country-year estimates from the final fit.
    Estimate(RunArgs),
    /// Out-of-sample validation and LOO comparison.
    Validate(RunArgs),
    /// Per-country SVG plots.
    Plot(RunArgs),
    /// Every stage.
    All(RunArgs),
    /// Writes a synthetic data set and a matching config.
    Simulate {
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        countries: usize,
        #[arg(long, default_value_t = 20)]
        years: usize,
        #[arg(long, default_value_t = 120)]
        observations: usize,
        /// Share of observations under a non-reference definition.
        #[arg(long, default_value_t = 0.2)]
        definition_share: f64,
        /// Share of observations with under-reported stillbirths.
        #[arg(long, default_value_t = 0.05)]
        underreport_share: f64,
        /// Write a config with a short sampler run.
        #[arg(long)]
        quick: bool,
    },
}

fn run(args: RunArgs, target: RunRequest) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let pipeline = Pipeline::new(config)?;
    let request = RunRequest { force: args.stage, ..target };
    let report = pipeline.run(&request)?;
    for (stage, status) in &report.stages {
        let s = match status {
            StageStatus::Ran => "ran",
            StageStatus::UpToDate => "up to date",
        };
        println!("{:<14} {s}", stage.name());
    }
    println!("outputs in {}", report.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Adjust(a) => run(a, RunRequest::through(Stage::AdjustObs)),
        Command::Screen(a) => run(a, RunRequest::through(Stage::Screen)),
        Command::Fit(a) => run(a, RunRequest::through(Stage::SubsettedFit)),
        Command::Estimate(a) => run(a, RunRequest::through(Stage::Estimates)),
        Command::Validate(a) => run(a, RunRequest::through(Stage::Validation)),
        Command::Plot(a) => run(a, RunRequest::through(Stage::Plots)),
        Command::All(a) => run(a, RunRequest::all()),
        Command::Simulate { out, seed, countries, years, observations, definition_share, underreport_share, quick } => {
            simulate(out, seed, countries, years, observations, definition_share, underreport_share, quick)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    out: PathBuf,
    seed: u64,
    countries: usize,
    years: usize,
    observations: usize,
    definition_share: f64,
    underreport_share: f64,
    quick: bool,
) -> Result<()> {
    let cfg = SimConfig {
        n_countries: countries,
        n_years: years,
        n_obs: observations,
        definition_share,
        underreport_share,
        seed,
        ..SimConfig::default()
    };
    let sim = simulate_model_data(&cfg).context("simulating data")?;
    let sampler = if quick {
        SamplerConfig { n_chains: 2, n_iter: 600, n_warmup: 300, ..SamplerConfig::default() }
    } else {
        SamplerConfig::default()
    };
    let path = write_simulated_project(&sim, &out, seed, sampler)?;
    println!("wrote {}", path.display());
    Ok(())
}
