//! `toe`: generate cohorts, train evidence-bottleneck models, run the
//! evidence search and its baselines, and emit CSV/JSON reports.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::Output;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "toe", version, about = "Evidence search over two-stream bottleneck models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run a single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated seeds; `{seed}` in paths is replaced per seed.
    #[arg(long, global = true, value_name = "LIST")]
    seeds: Option<String>,

    /// Output path.
    #[arg(long, global = true)]
    out: Option<String>,

    /// Cohort file.
    #[arg(long, global = true)]
    cohort: Option<String>,

    /// Model file.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Comma-separated evidence budgets.
    #[arg(long, global = true, value_name = "LIST")]
    budgets: Option<String>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort and a ground-truth summary.
    Generate {
        /// Inject a label-correlated binary feature.
        #[arg(long)]
        spurious: bool,
    },
    /// Train both phases and write the model plus a training log.
    Train {
        /// Retrain only the selectors of the model given by --model.
        #[arg(long)]
        phase2_only: bool,
    },
    /// Run search and baselines over budgets and write the suite CSV.
    Evaluate {
        /// Directory for per-budget search traces.
        #[arg(long, value_name = "DIR")]
        traces: Option<String>,
        /// Also write a long-format CSV for budget plots.
        #[arg(long, value_name = "FILE")]
        frontier: Option<String>,
    },
    /// Objective, stability-space and selector-temperature ablations.
    Ablate,
    /// Exhaustion, abstention and evidence-size diagnostics as JSON.
    Audit {
        /// Trace file from `evaluate --traces`; searches afresh if absent.
        #[arg(long, value_name = "FILE")]
        traces: Option<String>,
        /// Model trained on a spurious cohort.
        #[arg(long, requires = "spurious_cohort")]
        spurious_model: Option<String>,
        /// The spurious cohort that model was trained on.
        #[arg(long, requires = "spurious_model")]
        spurious_cohort: Option<String>,
    },
    /// Mean and standard deviation across seeds of suite CSVs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seeds", &s.to_string())?;
    }
    let flags = [
        ("seeds", &cli.seeds),
        ("out", &cli.out),
        ("cohort", &cli.cohort),
        ("model", &cli.model),
        ("budgets", &cli.budgets),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    match &cli.command {
        Command::Generate { spurious: true } => cfg.set("spurious", "true")?,
        Command::Evaluate { traces: Some(t), .. } | Command::Audit { traces: Some(t), .. } => cfg.set("traces", t)?,
        _ => {}
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let out = Output { force: cli.force };
    let traces = Some(cfg.get("traces")).filter(|t| !t.is_empty());
    match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg, &out),
        Command::Train { phase2_only } => commands::train_cmd(&cfg, *phase2_only, &out),
        Command::Evaluate { frontier, .. } => commands::evaluate(&cfg, traces, frontier.as_deref(), &out),
        Command::Ablate => commands::ablate(&cfg, &out),
        Command::Audit {
            spurious_model,
            spurious_cohort,
            ..
        } => {
            let sp = spurious_model.as_deref().zip(spurious_cohort.as_deref());
            commands::audit(&cfg, traces, sp, &out)
        }
        Command::Report { inputs } => commands::report(&cfg, inputs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = std::panic::catch_unwind(|| run(&cli));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}
