use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use jade_cli::commands;
use jade_cli::config::{parse_lambda_gamma, ExperimentConfig, Overrides};
use jade_cli::error::CliError;
use jade_core::engine::{LambdaGamma, Method};
use jade_core::simulate::Preset;

#[derive(Parser)]
#[command(
    name = "jade",
    version,
    about = "Joint estimation of latent processes and sparse additive dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Values given here override the
/// config document.
#[derive(Args)]
struct Common {
    /// Experiment configuration document (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Base RNG seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Estimation method: jade or twostage.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,

    /// Observation family: gaussian, poisson, or binomial.
    #[arg(long)]
    family: Option<Preset>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Derivative-fidelity weight.
    #[arg(long, value_name = "X")]
    lambda_theta: Option<f64>,

    /// Group penalty level, or "auto" to tune over the config grid.
    #[arg(long, value_name = "X", value_parser = parse_lambda_gamma)]
    lambda_gamma: Option<LambdaGamma>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset with known ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one dataset and write the fitted curves and components.
    Fit {
        /// Dataset CSV (its .meta.json sidecar must sit next to it).
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a penalty grid, write the score table, keep the best fit.
    Tune {
        /// Dataset CSV (its .meta.json sidecar must sit next to it).
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run both methods over many seeds and aggregate the metrics.
    Replicate {
        #[command(flatten)]
        common: Common,
    },
    /// Score a saved fit against a saved ground truth.
    Evaluate {
        /// Fit document (fit.json).
        fit: PathBuf,
        /// Ground-truth document (truth.json).
        truth: PathBuf,
        /// Dataset CSV the fit was produced on.
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_method(text: &str) -> Result<Method, String> {
    match text {
        "jade" => Ok(Method::Jade),
        "twostage" => Ok(Method::TwoStage),
        other => Err(format!("expected \"jade\" or \"twostage\", got {other:?}")),
    }
}

fn effective(common: &Common) -> Result<(ExperimentConfig, Method), CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: common.seed,
        family: common.family,
        lambda_theta: common.lambda_theta,
        lambda_gamma: common.lambda_gamma,
        out: common.out.clone(),
        method: common.method,
    });
    Ok((cfg, common.method.unwrap_or(Method::Jade)))
}

fn run() -> Result<String, CliError> {
    match Cli::parse().command {
        Command::Simulate { common } => {
            let (cfg, _) = effective(&common)?;
            Ok(commands::cmd_simulate(&cfg)?.summary)
        }
        Command::Fit { data, common } => {
            let (cfg, method) = effective(&common)?;
            Ok(commands::cmd_fit(&data, &cfg, method)?.summary)
        }
        Command::Tune { data, common } => {
            let (cfg, method) = effective(&common)?;
            Ok(commands::cmd_tune(&data, &cfg, method)?.summary)
        }
        Command::Replicate { common } => {
            let (cfg, _) = effective(&common)?;
            Ok(commands::cmd_replicate(&cfg)?.summary)
        }
        Command::Evaluate { fit, truth, data, common } => {
            let (cfg, _) = effective(&common)?;
            Ok(commands::cmd_evaluate(&fit, &truth, &data, &cfg)?.summary)
        }
    }
}

fn main() {
    match run() {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(e.exit_code());
        }
    }
}
