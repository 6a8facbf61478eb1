//! `otcd`: synthetic benchmark generation, transport-constrained training,
//! evaluation, standalone Sinkhorn solves, and experiment sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use otcd_cli::{cmd_eval, cmd_gen, cmd_sinkhorn, cmd_train, emit_figure_data, run_sweep};
use otcd_core::data::{Profile, SyntheticSpec};

#[derive(Parser)]
#[command(name = "otcd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Step,
    Exponential,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Step => Profile::Step,
            ProfileArg::Exponential => Profile::Exponential,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic imbalanced dataset directory.
    Gen {
        /// Number of known classes.
        #[arg(long)]
        known: usize,
        /// Number of unknown classes.
        #[arg(long)]
        unknown: usize,
        /// Feature dimension.
        #[arg(long)]
        dim: usize,
        /// Imbalance factor: known/unknown sample mass in the unlabeled pool.
        #[arg(long)]
        rho: f64,
        /// Shape of the unknown-class counts.
        #[arg(long, value_enum, default_value = "step")]
        profile: ProfileArg,
        /// Unlabeled samples per known class.
        #[arg(long = "per-class", default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-class sample standard deviation.
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        /// Scale of the class-mean distribution.
        #[arg(long = "mean-scale", default_value_t = 3.0)]
        mean_scale: f64,
        /// Labeled share of each known class.
        #[arg(long = "labeled-fraction", default_value_t = 0.5)]
        labeled_fraction: f64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a saved dataset and write run artifacts.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON training config; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON array of class indices over the unlabeled pool.
        #[arg(long)]
        predictions: PathBuf,
        /// Output metrics JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a transport problem file and emit the plan.
    Sinkhorn {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a sweep over an axis (rho values or loss ablations) and seeds.
    Sweep {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Emit the per-class predicted/truth count CSV of a finished run.
    FigureData {
        /// Run directory written by `train` or `sweep`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            known,
            unknown,
            dim,
            rho,
            profile,
            per_class,
            seed,
            spread,
            mean_scale,
            labeled_fraction,
            out,
        } => {
            let spec = SyntheticSpec {
                num_known: known,
                num_unknown: unknown,
                input_dim: dim,
                cluster_spread: spread,
                mean_scale,
                rho,
                profile: profile.into(),
                per_known_count: per_class,
                labeled_fraction,
                seed,
            };
            cmd_gen(&spec, &out)?;
            println!("dataset written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { dataset, config, out } => {
            cmd_train(&dataset, config.as_deref(), &out)?;
            println!("run artifacts written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            dataset,
            predictions,
            out,
        } => {
            cmd_eval(&dataset, &predictions, &out)?;
            println!("metrics written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sinkhorn { input, output } => {
            cmd_sinkhorn(&input, &output)?;
            println!("plan written to {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let experiment = serde_json::from_str(&text).context("parsing sweep config")?;
            let summary = run_sweep(&experiment)?;
            println!(
                "sweep finished: {}/{} runs succeeded",
                summary.total_runs - summary.failed_runs,
                summary.total_runs
            );
            if summary.all_succeeded() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::FigureData { run, out } => {
            emit_figure_data(&run, &out)?;
            println!("figure data written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
