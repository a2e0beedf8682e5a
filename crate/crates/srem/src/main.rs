use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use srem::commands::{
    cmd_baseline, cmd_fit, cmd_gof, cmd_report, cmd_sample, cmd_simulate, CommandContext,
};
use srem::fit::Criterion;

/// Smooth relational event models: simulate, sample, fit, and diagnose
/// time-stamped sender -> receiver event networks.
#[derive(Parser)]
#[command(name = "srem", version, about)]
struct Cli {
    /// Run configuration (TOML or JSON)
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,

    /// Override the root seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for parallel sections (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Smoothing criterion override
    #[arg(long, global = true, value_parser = parse_criterion)]
    criterion: Option<Criterion>,

    /// Sampled-set size override (m - 1 controls per event)
    #[arg(long, global = true)]
    m: Option<usize>,

    /// Emit errors as machine-readable JSON on stderr
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate event sequences from the configured ground truth
    Simulate,
    /// Build the nested case-control dataset from an event file
    Sample,
    /// Fit the model and export coefficient curves
    Fit,
    /// Estimate matched and pooled cumulative baseline hazards
    Baseline,
    /// Receiver-level martingale goodness-of-fit tests
    Gof,
    /// Fit candidate models and summarize AIC, curves, and fit quality
    Report,
}

fn run(cli: &Cli) -> srem::Result<String> {
    if let Some(threads) = cli.threads {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if threads > 0 {
            builder = builder.num_threads(threads);
        }
        // a global pool may already exist when invoked twice in-process
        let _ = builder.build_global();
    }
    let mut ctx = CommandContext::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        ctx.config.seed = seed;
    }
    if let Some(out) = &cli.out {
        ctx.config.out = out.clone();
    }
    if let Some(criterion) = cli.criterion {
        ctx.config.model.criterion = criterion;
    }
    if let Some(m) = cli.m {
        ctx.config.model.m = m;
    }
    match cli.command {
        Command::Simulate => {
            let summary = cmd_simulate(&ctx)?;
            Ok(format!(
                "simulated {} replication(s); events per replication: {:?}",
                summary.n_reps, summary.event_counts
            ))
        }
        Command::Sample => {
            let path = cmd_sample(&ctx)?;
            Ok(format!("wrote case-control dataset to {}", path.display()))
        }
        Command::Fit => {
            let path = cmd_fit(&ctx)?;
            Ok(format!("wrote fit to {}", path.display()))
        }
        Command::Baseline => {
            let path = cmd_baseline(&ctx)?;
            Ok(format!("wrote baseline curves to {}", path.display()))
        }
        Command::Gof => {
            let path = cmd_gof(&ctx)?;
            Ok(format!("wrote goodness-of-fit report to {}", path.display()))
        }
        Command::Report => {
            let path = cmd_report(&ctx)?;
            Ok(format!("wrote model report to {}", path.display()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            if cli.json_errors {
                let payload = serde_json::json!({
                    "error": err.to_string(),
                    "config": cli.config.display().to_string(),
                });
                eprintln!("{payload}");
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::FAILURE
        }
    }
}
