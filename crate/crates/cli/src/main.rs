use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperbo::acquisition::Acquisition;
use hyperbo::gp::{KernelKind, MeanKind};
use hyperbo::objectives::{DegenerateMode, ObjectiveKind};

mod commands;

/// Meta Bayesian optimization with a pre-trained GP prior.
#[derive(Parser)]
#[command(name = "hyperbo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GP prior on a study and write its parameters as JSON.
    Fit(FitArgs),
    /// Replay BO on one task's recorded trials.
    BoOffline(BoOfflineArgs),
    /// Run BO against a synthetic task's ground-truth function.
    BoOnline(BoOnlineArgs),
    /// Sample a synthetic study from a ground-truth GP.
    SynthGen(SynthArgs),
    /// Summarize stored runs.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Adam steps per restart.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Random restarts per structure.
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Mean families to search, comma separated.
    #[arg(long, default_value = "constant,linear", value_delimiter = ',')]
    pub means: Vec<MeanKind>,
    /// Kernel families to search: se, matern32, matern52, dot.
    #[arg(long, default_value = "se,matern52,dot", value_delimiter = ',')]
    pub kernels: Vec<KernelKind>,
    /// Divergence used when the sample covariance is singular: pseudo_kl or epsilon.
    #[arg(long, default_value = "pseudo_kl")]
    pub degenerate: DegenerateMode,
    /// Coordinate tolerance for matching inputs across tasks.
    #[arg(long, default_value_t = hyperbo::dataset::DEFAULT_MATCH_TOL)]
    pub match_tol: f64,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub study: PathBuf,
    /// nll, kl, nllkl or nllkl:<lambda>.
    #[arg(long, default_value = "nll")]
    pub objective: ObjectiveKind,
    /// Task to leave out of training.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Train on per-task softplus-squashed values, as online runs see them.
    #[arg(long)]
    pub online_warp: bool,
    /// Where to write the fitted parameters.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional path for the full training result (all restart traces).
    #[arg(long)]
    pub result: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args)]
pub struct BoArgs {
    #[arg(long)]
    pub study: PathBuf,
    #[arg(long)]
    pub test_task: String,
    /// h-nll, h-kl, h-nllkl[:lambda], rand, stbo or stboh.
    #[arg(long)]
    pub method: commands::MethodArg,
    /// pi<margin>, ei, ucb:<zeta> or ucb-theory:<delta>.
    #[arg(long, default_value = "pi0.1")]
    pub acq: Acquisition,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    /// Number of seeds; seeds run as seed-base, seed-base + 1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    /// Use these prior parameters instead of training one.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args)]
pub struct BoOfflineArgs {
    #[command(flatten)]
    pub bo: BoArgs,
    /// Never pick a pool point twice while unpicked points remain.
    #[arg(long)]
    pub dedup: bool,
}

#[derive(Args)]
pub struct BoOnlineArgs {
    #[command(flatten)]
    pub bo: BoArgs,
    /// Sidecar truth file written by synth-gen.
    #[arg(long)]
    pub truth: PathBuf,
    /// Quasi-random candidates per iteration.
    #[arg(long, default_value_t = hyperbo::bo::DEFAULT_CANDIDATES)]
    pub candidates: usize,
    /// Grid size for estimating the task maximum.
    #[arg(long, default_value_t = 10_000)]
    pub max_resolution: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Ground-truth GP parameters (JSON).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub tasks: usize,
    #[arg(long)]
    pub points: usize,
    #[arg(long, default_value_t = 0.5)]
    pub matched_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input dimension; required for the dot-product kernel.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Sidecar path; defaults to `<out stem>.truth.json`.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum ReportCommand {
    /// Fraction of tasks on which each method beats the cross-method median.
    Profile {
        #[arg(long)]
        runs: PathBuf,
        /// Iteration defining the criterion; defaults to the last.
        #[arg(long)]
        criterion_iteration: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 20/50/80th percentiles of simple regret per method.
    Percentiles {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task speedup of method A over method B.
    Speedup {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NLL and divergence of untrained, single-task and multi-task models.
    Diagnostics {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        holdout: String,
        /// Multi-task parameters from `fit`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("HYPERBO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HYPERBO_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::BoOffline(a) => commands::bo_offline(&a),
        Command::BoOnline(a) => commands::bo_online(&a),
        Command::SynthGen(a) => commands::synth_gen(&a),
        Command::Report(r) => commands::report(&r),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
