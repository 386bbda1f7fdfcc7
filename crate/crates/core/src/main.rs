use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lcc_core::harness::config::ExperimentConfig;
use lcc_core::harness::pipeline::{sweep, Pipeline, Stage};
use lcc_core::harness::report::{EvalReport, SweepAxis};
use lcc_core::{LccError, Result};

#[derive(Parser)]
#[command(name = "lcc", version, about = "Prune a toy transformer and recover it with learned lost components")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and train (or load) the dense model.
    Train,
    /// Compute calibration norms and the pruning mask.
    Prune,
    /// Capture dense and pruned head activations on the probe split.
    Capture,
    /// Estimate per-head lost components and the logit-gain table.
    Decompose,
    /// Rank heads and select the compensation sites.
    Probe,
    /// Initialize and train the components.
    Compensate,
    /// Fold trained components into the pruned checkpoint.
    Fold,
    /// Evaluate dense, pruned and recovered models on the held-out split.
    Eval,
    /// Run the pipeline for each value along one axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Print the report of a completed run.
    Report {
        /// Print JSON instead of the text summary.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    K,
    HeadFraction,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli).map_err(|e| LccError::Stage {
        stage: "config",
        source: Box::new(e),
    })?;
    let stage = match &cli.command {
        Command::Train => Stage::Train,
        Command::Prune => Stage::Prune,
        Command::Capture => Stage::Capture,
        Command::Decompose => Stage::Decompose,
        Command::Probe => Stage::Probe,
        Command::Compensate => Stage::Compensate,
        Command::Fold => Stage::Fold,
        Command::Eval => Stage::Eval,
        Command::Sweep { axis, values } => {
            let axis = match axis {
                Axis::K => SweepAxis::K,
                Axis::HeadFraction => SweepAxis::HeadFraction,
            };
            let (_, path) = sweep(&cfg, axis, values)?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| LccError::Io { path: path.clone(), source: e })?);
            eprintln!("wrote {}", path.display());
            return Ok(());
        }
        Command::Report { json } => {
            let pipe = Pipeline::new(cfg)?;
            let path = pipe.report_path();
            let text = std::fs::read_to_string(&path).map_err(|e| LccError::Stage {
                stage: "report",
                source: Box::new(LccError::Io {
                    path: path.clone(),
                    source: e,
                }),
            })?;
            if *json {
                print!("{text}");
            } else {
                let report: EvalReport = serde_json::from_str(&text)?;
                print!("{}", report.to_text());
            }
            return Ok(());
        }
    };
    let pipe = Pipeline::new(cfg)?;
    let state = pipe.run_until(stage)?;
    for a in &state.artifacts {
        println!("{}", pipe.config().out_dir.join(a).display());
    }
    if let Some(r) = state.report {
        eprint!("{}", r.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
