//! `clonesim` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 solver failure,
//! 4 fit did not converge (the report is still written).

mod commands;
mod config;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clonesim::scenarios::{Experiment, Group};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "clonesim", version, about = "Simulate and fit the antigen-regulated clonal expansion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate one scenario and write its trajectory table.
    Simulate(SimulateArgs),
    /// Run every arm of an experiment and summarise the reported observables.
    Report(ReportArgs),
    /// Estimate parameters from a data file.
    Fit(FitArgs),
    /// Run a preset over a Cartesian grid of parameter values.
    Sweep(SweepArgs),
    /// Write a synthetic data file from the model.
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a model parameter, e.g. `--param s=0` (repeatable).
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Fixed solver step in hours.
    #[arg(long = "step-h")]
    step_h: Option<f64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<Experiment>,
    #[arg(long)]
    group: Option<Group>,
    /// Precursor density of an experiment1 arm.
    #[arg(long)]
    n0: Option<f64>,
    #[arg(long)]
    antigen_dose: Option<f64>,
    /// Output grid spacing in hours.
    #[arg(long)]
    grid: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// experiment1, experiment2 or experiment3.
    experiment: Option<Experiment>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Data file (CSV).
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated free parameters; all six when absent.
    #[arg(long, value_delimiter = ',')]
    free: Vec<String>,
    /// Additional randomised starting points.
    #[arg(long, default_value_t = 0)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iterations: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Experiment,
    /// `KEY=START:STOP:COUNT` or `KEY=V1,V2,...` (repeatable).
    #[arg(long = "grid", value_name = "SPEC", required = true)]
    grids: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: Common,
    /// Relative lognormal noise level.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for p in &common.params {
        config.set_param(p)?;
    }
    if let Some(h) = common.step_h {
        config.solver.step = Some(h);
    }
    if let Some(out) = &common.out {
        config.output.path = Some(out.clone());
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => {
            let mut config = load(&a.common)?;
            let sc = &mut config.scenario;
            if a.preset.is_some() {
                sc.preset = a.preset;
                sc.custom = None;
            }
            if a.group.is_some() {
                sc.group = a.group;
            }
            if a.n0.is_some() {
                sc.n0 = a.n0;
            }
            if a.antigen_dose.is_some() {
                sc.antigen_dose = a.antigen_dose;
            }
            if let Some(grid) = a.grid {
                config.output.grid = grid;
            }
            if a.common.dump_config {
                return commands::dump(&config);
            }
            commands::simulate(&config)
        }
        Command::Report(a) => {
            let mut config = load(&a.common)?;
            if a.experiment.is_some() {
                config.scenario.preset = a.experiment;
            }
            if a.common.dump_config {
                return commands::dump(&config);
            }
            commands::report(&config)
        }
        Command::Fit(a) => {
            let config = load(&a.common)?;
            if a.common.dump_config {
                return commands::dump(&config);
            }
            let free = a.free.iter().map(|s| s.parse::<clonesim::fit::FreeParam>()).collect::<Result<Vec<_>, _>>()?;
            commands::fit(&config, &a.data, free, a.starts, a.seed, a.max_iterations)
        }
        Command::Sweep(a) => {
            let mut config = load(&a.common)?;
            config.scenario.preset = Some(a.preset);
            if a.common.dump_config {
                return commands::dump(&config);
            }
            commands::sweep(&config, &a.grids)
        }
        Command::Synthesize(a) => {
            let config = load(&a.common)?;
            if a.common.dump_config {
                return commands::dump(&config);
            }
            commands::synthesize(&config, a.noise, a.seed)
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CLONESIM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("CLONESIM_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_broken_pipe() => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clonesim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
