use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divkf::harness::{run_sweep, ExperimentConfig, OutputSpec, Scenario};
use divkf::FilterError;

#[derive(Parser)]
#[command(name = "divkf", about = "Nonlinear Kalman filter experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Radar tracking sweep over process noise.
    Radar(RunArgs),
    /// Sensor-network tracking sweep.
    Sensor(RunArgs),
    /// Option-price tracking with the Black-Scholes model.
    Options(RunArgs),
    /// Linear-Gaussian 1-D check against the exact Kalman filter.
    Smoke(RunArgs),
    /// Adaptive sample sizing on the sensor network.
    Adaptive(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; its scenario must match the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Five trials and a reduced sweep.
    #[arg(long)]
    desk_scale: bool,
}

fn build_config(scenario: Scenario, adaptive: bool, args: &RunArgs) -> Result<ExperimentConfig, FilterError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.scenario != scenario {
                return Err(FilterError::ConfigError(format!(
                    "config scenario {} does not match subcommand {}",
                    cfg.scenario.as_str(),
                    scenario.as_str()
                )));
            }
            cfg
        }
        None if adaptive => ExperimentConfig::adaptive_study(),
        None => ExperimentConfig::for_scenario(scenario),
    };
    if args.desk_scale {
        cfg = cfg.desk_scale();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, adaptive, stem, args) = match &cli.command {
        Command::Radar(a) => (Scenario::Radar, false, "radar", a),
        Command::Sensor(a) => (Scenario::Sensor, false, "sensor", a),
        Command::Options(a) => (Scenario::Options, false, "options", a),
        Command::Smoke(a) => (Scenario::Custom1d, false, "smoke", a),
        Command::Adaptive(a) => (Scenario::Sensor, true, "adaptive", a),
    };
    let outcome = build_config(scenario, adaptive, args)
        .and_then(|cfg| run_sweep(&cfg, Some(&OutputSpec::new(&args.out_dir, stem))));
    match outcome {
        Ok(rows) => {
            eprintln!(
                "wrote {} rows to {}",
                rows.len(),
                args.out_dir.join(format!("{stem}.csv")).display()
            );
            ExitCode::SUCCESS
        }
        Err(e @ FilterError::ConfigError(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ FilterError::Io(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
