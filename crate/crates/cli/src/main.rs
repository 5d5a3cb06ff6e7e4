//! `miktst`: prepare data, train, fine-tune, predict and evaluate from a
//! single TOML run config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use miktst_core::eval::SweepParam;
use miktst_core::train::FinetuneStrategy;

use commands::Console;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "miktst", version, about = "Transfer-learning load forecaster for EV charging stations")]
struct Cli {
    /// TOML run config; built-in defaults when absent.
    #[arg(long, global = true, env = "MIKTST_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate series, split stations and cache the dataset.
    Prepare,
    /// Pre-train on the source stations.
    Pretrain,
    /// Adapt the pre-trained model to each target station.
    Finetune {
        /// freeze, full or small-batch; overrides the config.
        #[arg(long)]
        strategy: Option<FinetuneStrategy>,
        /// Train fresh models on the target slices instead.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Write forecasts for every target evaluation window.
    Predict {
        /// Restrict to one target station.
        #[arg(long)]
        station: Option<String>,
    },
    /// Score the fine-tuned models and persistence baselines.
    Evaluate {
        /// Also report errors in kWh.
        #[arg(long)]
        kwh: bool,
    },
    /// Run the full model and the three ablations over the seed list.
    Ablate {
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        strategy: Option<FinetuneStrategy>,
    },
    /// Vary one of d, n_heads, r and record metrics per value and seed.
    Sweep {
        /// d, n_heads or r; all three when absent.
        #[arg(long)]
        param: Option<SweepParam>,
        /// Comma-separated values; overrides the config.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        strategy: Option<FinetuneStrategy>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match &cli.command {
        Command::Evaluate { kwh: true } => cfg.eval.physical_units = true,
        Command::Ablate { seeds: Some(s), .. } | Command::Sweep { seeds: Some(s), .. } => cfg.eval.seeds = s.clone(),
        _ => {}
    }
    if let Command::Sweep {
        param: Some(p),
        values: Some(v),
        ..
    } = &cli.command
    {
        match p {
            SweepParam::Width => cfg.sweep.d = v.clone(),
            SweepParam::Heads => cfg.sweep.n_heads = v.clone(),
            SweepParam::Layers => cfg.sweep.r = v.clone(),
        }
    }
    cfg.sync();
    cfg.validate()?;
    commands::check_out_dir(&cfg)?;

    let console = Console { quiet: cli.quiet };
    let default_strategy = cfg.finetune.strategy;
    match cli.command {
        Command::Prepare => commands::prepare(&cfg, &console),
        Command::Pretrain => commands::pretrain_cmd(&cfg, &console),
        Command::Finetune { strategy, from_scratch } => {
            commands::finetune_cmd(&cfg, strategy.unwrap_or(default_strategy), from_scratch, &console)
        }
        Command::Predict { station } => commands::predict_cmd(&cfg, station.as_deref(), &console),
        Command::Evaluate { .. } => commands::evaluate_cmd(&cfg, &console),
        Command::Ablate { strategy, .. } => commands::ablate_cmd(&cfg, strategy.unwrap_or(default_strategy), &console),
        Command::Sweep { param, strategy, .. } => {
            let params = match param {
                Some(p) => vec![p],
                None => vec![SweepParam::Width, SweepParam::Heads, SweepParam::Layers],
            };
            commands::sweep_cmd(&cfg, &params, strategy.unwrap_or(default_strategy), &console)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cause: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", cause.join(": "));
            ExitCode::FAILURE
        }
    }
}
