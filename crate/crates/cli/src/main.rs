use anyhow::Result;
use clap::{Parser, Subcommand};
use clipfree_cli::commands::{cmd_account, cmd_audit, cmd_certify, cmd_train};
use clipfree_core::accountant::Strategy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "clipfree",
    about = "Differentially private training of Lipschitz networks with certified \
             gradient-norm bounds instead of per-sample clipping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report (epsilon, delta) alongside accuracy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Certify per-layer sensitivities of the configured model at
    /// initialization.
    Certify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compose the training mechanism offline and report epsilon.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        sampling_prob: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Number of noised layers; only meaningful for the local strategy.
        #[arg(long, default_value_t = 1)]
        layers: usize,
        /// Optional epsilon budget; reports the largest step count within it.
        #[arg(long)]
        epsilon_max: Option<f64>,
    },
    /// Replay the gradient-norm audit for a checkpoint over a dataset.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "local" => Ok(Strategy::Local),
        "global" => Ok(Strategy::Global),
        other => Err(format!("unknown strategy {other}, expected local|global")),
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            data_dir,
            out,
            seed,
        } => {
            let summary = cmd_train(&config, &data_dir, &out, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            match (summary.epsilon, summary.val_accuracy) {
                (Some(eps), Some(acc)) => eprintln!(
                    "final: epsilon = {eps:.4} at delta = {}, validation accuracy = {acc:.4}",
                    summary.delta
                ),
                (None, Some(acc)) => eprintln!(
                    "final: no noise (sigma = 0, no DP guarantee), validation accuracy = {acc:.4}"
                ),
                _ => {}
            }
            Ok(true)
        }
        Command::Certify { config } => {
            let report = cmd_certify(&config)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Account {
            sigma,
            sampling_prob,
            steps,
            delta,
            strategy,
            layers,
            epsilon_max,
        } => {
            let report = cmd_account(
                sigma,
                sampling_prob,
                steps,
                delta,
                strategy,
                layers,
                epsilon_max,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!(
                "epsilon = {:.6} at delta = {} (optimal order {})",
                report.epsilon, report.delta, report.optimal_order
            );
            Ok(true)
        }
        Command::Audit {
            config,
            checkpoint,
            data_dir,
        } => {
            let output = cmd_audit(&config, &checkpoint, &data_dir)?;
            println!("{}", serde_json::to_string_pretty(&output)?);
            if output.pass {
                eprintln!("audit pass: max ratio {:.6}", output.max_ratio);
            } else {
                eprintln!(
                    "audit FAIL: max ratio {:.6} at layer {}",
                    output.max_ratio, output.worst_layer
                );
            }
            Ok(output.pass)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
