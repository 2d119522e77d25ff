use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pslora::commands::{cmd_analyze, cmd_eval, cmd_merge, cmd_metrics, cmd_pretrain, cmd_train, Analysis};
use pslora::config::{parse_order, round_json, ExperimentConfig, MergeCadence};
use pslora::metrics::FrMode;
use pslora::MergeStrategy;

#[derive(Parser)]
#[command(name = "pslora", version, about = "Continual low-rank adaptation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    merge_strategy: Option<StrategyArg>,
    #[arg(long, global = true, value_enum)]
    merge_cadence: Option<CadenceArg>,
    /// Task order as 1-based indices, e.g. "4,3,2,1".
    #[arg(long, global = true)]
    order: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "magnitude_max")]
    MagnitudeMax,
    Average,
    Ties,
    /// No merge: plain incremental adapters.
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum CadenceArg {
    Final,
    PerTask,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the base network.
    Pretrain,
    /// Train the task sequence with per-task adapters.
    Train,
    /// Merge trained adapters into dense weights.
    Merge {
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Evaluate dense weights on every task.
    Eval {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Continual-learning metrics from accuracy-matrix files.
    Metrics {
        inputs: Vec<PathBuf>,
        /// Take the peak over stages up to and including the task's own (j <= i).
        #[arg(long)]
        fr_literal: bool,
    },
    /// Diagnostics over a trained run.
    Analyze {
        #[arg(value_enum)]
        which: AnalysisArg,
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisArg {
    SignSplit,
    ShiftHist,
    Similarity,
    Taylor,
}

fn resolve(c: &Common) -> pslora::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = c.alpha {
        cfg.alpha = v;
    }
    if let Some(s) = c.merge_strategy {
        cfg.merge_strategy = match s {
            StrategyArg::MagnitudeMax => Some(MergeStrategy::MagnitudeMax),
            StrategyArg::Average => Some(MergeStrategy::Average),
            StrategyArg::Ties => Some(MergeStrategy::Ties),
            StrategyArg::None => None,
        };
    }
    if let Some(c) = c.merge_cadence {
        cfg.merge_cadence = match c {
            CadenceArg::Final => MergeCadence::Final,
            CadenceArg::PerTask => MergeCadence::PerTask,
        };
    }
    if let Some(o) = &c.order {
        cfg.order = parse_order(o)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: Serialize>(v: &T) -> pslora::Result<()> {
    let mut v = serde_json::to_value(v)?;
    round_json(&mut v);
    // A closed pipe (e.g. `| head`) is not an error for a report printer.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn run(cli: Cli) -> pslora::Result<()> {
    let cfg = resolve(&cli.common)?;
    if cli.common.dry_run {
        return print(&cfg);
    }
    match cli.command {
        Command::Pretrain => {
            let r = cmd_pretrain(&cfg)?;
            let _ = writeln!(
                std::io::stdout(),
                "base accuracy {:.4}, wrote {}",
                r.base_accuracy,
                r.checkpoint.display()
            );
        }
        Command::Train => {
            print(&cmd_train(&cfg)?.metrics)?;
        }
        Command::Merge { adapters } => {
            let r = cmd_merge(&cfg, adapters.as_deref())?;
            let _ = writeln!(std::io::stdout(), "{} merge, checksum {}", r.strategy, r.checksum);
        }
        Command::Eval { weights } => print(&cmd_eval(&cfg, weights.as_deref())?.per_task)?,
        Command::Metrics { inputs, fr_literal } => {
            let mode = if fr_literal { FrMode::Literal } else { FrMode::Peak };
            print(&cmd_metrics(&cfg, &inputs, mode)?)?;
        }
        Command::Analyze { which, adapters } => {
            let which = match which {
                AnalysisArg::SignSplit => Analysis::SignSplit,
                AnalysisArg::ShiftHist => Analysis::ShiftHist,
                AnalysisArg::Similarity => Analysis::Similarity,
                AnalysisArg::Taylor => Analysis::Taylor,
            };
            print(&cmd_analyze(&cfg, which, adapters.as_deref())?["summary"])?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
