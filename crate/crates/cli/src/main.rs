//! `slseg`: phantom generation, constraint-guided training, evaluation,
//! gradient checking, and report rendering behind one binary.
//!
//! Usage errors exit 2 (clap), a failed gradient check exits 1, and any
//! other failure exits 1 with a one-line `error: ...` on stderr.

mod commands;
mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Two-lobe phantom segmentation with differentiable logical constraints.
#[derive(Parser)]
#[command(name = "slseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Generate(GenerateArgs),
    /// Train k-fold models for one mode and training fraction.
    Train(TrainArgs),
    /// Score a finished run into a constraint-satisfaction report.
    Evaluate(EvaluateArgs),
    /// Check every differentiable operation against finite differences.
    Gradcheck(GradcheckArgs),
    /// Merge stored evaluation reports into summary tables.
    Report(ReportArgs),
}

/// Pairs of (config key, value) collected from the flags a user passed.
type Overrides = Vec<(&'static str, String)>;

fn push<T: Display>(overrides: &mut Overrides, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        overrides.push((key, v.to_string()));
    }
}

fn push_path(overrides: &mut Overrides, key: &'static str, value: &Option<PathBuf>) {
    if let Some(p) = value {
        overrides.push((key, p.display().to_string()));
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Key = value configuration file applied before flag overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Generation seed (also seeds the fold assignment downstream).
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid height.
    #[arg(long)]
    height: Option<usize>,
    /// Grid width.
    #[arg(long)]
    width: Option<usize>,
    /// Additive image noise standard deviation.
    #[arg(long)]
    noise_std: Option<f64>,
}

impl GenerateArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::new();
        push(&mut o, "n", &self.n);
        push(&mut o, "data_seed", &self.seed);
        push_path(&mut o, "data", &self.out);
        push(&mut o, "height", &self.height);
        push(&mut o, "width", &self.width);
        push(&mut o, "noise_std", &self.noise_std);
        o
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Key = value configuration file applied before flag overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (read-only).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training objective: baseline | ltn.
    #[arg(long)]
    mode: Option<String>,
    /// Fraction of each training split to use, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// Cross-validation folds.
    #[arg(long)]
    k: Option<usize>,
    /// Global seed for model init, shuffling, and subsampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the fold assignment (must match the dataset's generation).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Optimization epochs per fold.
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// Samples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Warmup length as a fraction of total optimizer steps.
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// Exponent of the satisfaction aggregation across formulas.
    #[arg(long)]
    agg_p: Option<f64>,
    /// Epochs over which the knowledge-base loss fades in (0 = off).
    #[arg(long)]
    constraint_ramp_epochs: Option<usize>,
    /// Connectedness decay rate.
    #[arg(long)]
    gamma_c: Option<f64>,
    /// Volume-similarity decay rate.
    #[arg(long)]
    gamma_v: Option<f64>,
    /// Tolerated volume difference as a grid fraction.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Exponent on nearest-neighbor distances in the region distance.
    #[arg(long)]
    chamfer_power: Option<f64>,
    /// Chord pairs sampled per nesting test.
    #[arg(long)]
    nesting_pairs: Option<usize>,
    /// Interpolation points per chord.
    #[arg(long)]
    nesting_steps: Option<usize>,
    /// Exponent of the p-mean quantifier and the nesting smooth maximum.
    #[arg(long)]
    quantifier_p: Option<f64>,
    /// Channel width of the first encoder stage.
    #[arg(long)]
    base_width: Option<usize>,
    /// Encoder/decoder stages.
    #[arg(long)]
    depth: Option<usize>,
    /// Train folds on separate threads; results are bit-identical.
    #[arg(long)]
    parallel: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::new();
        push_path(&mut o, "data", &self.data);
        push_path(&mut o, "out", &self.out);
        push(&mut o, "mode", &self.mode);
        push(&mut o, "fraction", &self.fraction);
        push(&mut o, "k", &self.k);
        push(&mut o, "seed", &self.seed);
        push(&mut o, "data_seed", &self.data_seed);
        push(&mut o, "epochs", &self.epochs);
        push(&mut o, "eta", &self.eta);
        push(&mut o, "batch_size", &self.batch_size);
        push(&mut o, "warmup_fraction", &self.warmup_fraction);
        push(&mut o, "agg_p", &self.agg_p);
        push(&mut o, "constraint_ramp_epochs", &self.constraint_ramp_epochs);
        push(&mut o, "gamma_c", &self.gamma_c);
        push(&mut o, "gamma_v", &self.gamma_v);
        push(&mut o, "epsilon", &self.epsilon);
        push(&mut o, "chamfer_power", &self.chamfer_power);
        push(&mut o, "nesting_pairs", &self.nesting_pairs);
        push(&mut o, "nesting_steps", &self.nesting_steps);
        push(&mut o, "quantifier_p", &self.quantifier_p);
        push(&mut o, "base_width", &self.base_width);
        push(&mut o, "depth", &self.depth);
        if self.parallel {
            o.push(("parallel", "true".to_string()));
        }
        o
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory produced by `train` (holds config.txt and fold_*/).
    #[arg(long)]
    run: PathBuf,
    /// Override the dataset path recorded in the run's config echo.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random input draws per check.
    #[arg(long, default_value_t = 6)]
    rounds: usize,
    /// Relative error tolerance.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Base seed of the random inputs.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched for report.csv files (an output root or one run).
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Also write the tables to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = file {
        config.apply_file(path)?;
    }
    for (key, value) in overrides {
        config.set(key, value)?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => {
            let config = resolve(args.config.as_deref(), &args.overrides())?;
            commands::generate(&config)?;
        }
        Command::Train(args) => {
            let config = resolve(args.config.as_deref(), &args.overrides())?;
            commands::train(&config)?;
        }
        Command::Evaluate(args) => {
            commands::evaluate(&args.run, args.data.as_deref())?;
        }
        Command::Gradcheck(args) => {
            if !commands::gradcheck(args.rounds, args.tol, args.seed)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report(args) => {
            commands::report(&args.runs, args.out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
