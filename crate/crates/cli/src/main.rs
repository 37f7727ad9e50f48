//! `voltadapt` — certify, simulate, train and evaluate decentralized adaptive
//! voltage controllers on a radial feeder.
//!
//! Exit codes: 0 success, 1 a stability condition failed (or the request is
//! infeasible), 2 input error, 3 the closed loop diverged.

mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use voltadapt::control::ControllerKind;
use voltadapt::Error;

use crate::commands::Status;

#[derive(Debug, Parser)]
#[command(name = "voltadapt", version, about = "Adaptive voltage control experiments")]
struct Cli {
    /// Feeder line list (`buses=… base_kva=… base_kv=…` then `from to r_ohm x_ohm`);
    /// the bundled 33-bus feeder when omitted.
    #[arg(long, global = true)]
    feeder: Option<PathBuf>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (give it before the subcommand; `train` and
    /// `gen-scenario` use `--out` for their output file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run controllers that fail certification.
    #[arg(long, global = true)]
    allow_uncertified: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the stability conditions for a parameter file.
    Certify(CertifyArgs),
    /// Run one closed-loop rollout and write its trajectory.
    Simulate(SimulateArgs),
    /// Fit controller parameters on sampled sinusoidal scenarios.
    Train(TrainArgs),
    /// Compare an adaptive and a linear controller on a test set.
    Evaluate(EvaluateArgs),
    /// Write a sinusoidal injection trace.
    GenScenario(GenScenarioArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Controller {
    Linear,
    Adaptive,
}

impl From<Controller> for ControllerKind {
    fn from(c: Controller) -> Self {
        match c {
            Controller::Linear => ControllerKind::Linear,
            Controller::Adaptive => ControllerKind::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    /// Centralized conditions only.
    Centralized,
    /// Per-bus conditions only (the centralized ones are still reported).
    Decentralized,
    /// Both groups must pass.
    Both,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// Controller parameter file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Scenario ranges (TOML), replacing the `[scenario]` table.
    #[arg(long)]
    scenario_config: Option<PathBuf>,
    /// Measured injection trace providing the φ samples.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Number of steps whose φ(t) are sampled.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum, default_value_t = CheckKind::Both)]
    check: CheckKind,
    /// Bins of the spectral-radius histogram.
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum)]
    controller: Option<Controller>,
    #[arg(long)]
    scenario_config: Option<PathBuf>,
    /// Measured injection trace instead of a sinusoidal scenario.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Also write voltage and reactive-power plot data.
    #[arg(long)]
    emit_plot_data: bool,
    /// Ignore the action bounds in the parameter file.
    #[arg(long)]
    no_clamp: bool,
    /// Voltage at t+1 uses the injections of step t.
    #[arg(long)]
    lagged: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    controller: Option<Controller>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    scenario_config: Option<PathBuf>,
    /// Parameter file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV to write.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    adaptive: Option<PathBuf>,
    #[arg(long)]
    linear: Option<PathBuf>,
    #[arg(long)]
    scenario_config: Option<PathBuf>,
    /// Number of test scenarios.
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Injection-magnitude ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct GenScenarioArgs {
    #[arg(long)]
    scenario_config: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Trace file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Infeasible(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = commands::Globals {
        feeder: cli.feeder,
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        allow_uncertified: cli.allow_uncertified,
    };
    let result = match &cli.command {
        Command::Certify(args) => commands::certify(&globals, args),
        Command::Simulate(args) => commands::simulate(&globals, args),
        Command::Train(args) => commands::train(&globals, args),
        Command::Evaluate(args) => commands::evaluate(&globals, args),
        Command::GenScenario(args) => commands::gen_scenario(&globals, args),
    };
    match result {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::ConditionFailed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
