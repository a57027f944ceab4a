//! `mlgem`: simulate panels, fit and select joint systemic/category
//! networks, evaluate estimates and run the cross-block tests.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlgem_core::{BlockNorm, FitMethod};

use commands::{CriterionKind, FitArgs, Format, Globals, SelectArgs, TestKind};
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "mlgem",
    version,
    about = "Joint estimation of category-specific and systemic Gaussian graphical models"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Seed for simulation, fold assignment and resampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for concurrent fits (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// eBIC strength in [0, 1].
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// EM stopping threshold on the change in penalised log-likelihood.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// EM iteration cap.
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a panel dataset and its generating networks from a scenario config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit at fixed penalties.
    Fit {
        /// Data CSV; the manifest is the same path with a .json extension.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "em")]
        method: FitMethod,
        /// Sets both penalties.
        #[arg(long, conflicts_with_all = ["lambda1", "lambda2"])]
        lambda: Option<f64>,
        #[arg(long, requires = "lambda2")]
        lambda1: Option<f64>,
        #[arg(long, requires = "lambda1")]
        lambda2: Option<f64>,
        /// Estimate directory to start EM from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose penalties over a grid by eBIC or cross-validation.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "em")]
        method: FitMethod,
        #[arg(long, value_enum, default_value_t = CriterionKind::Ebic)]
        criterion: CriterionKind,
        /// JSON grid {schema_version, lambda1_values, lambda2_values}.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Losses and support errors of an estimate against the truth.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROC curves over a tied penalty path for simulated replicates.
    Roc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resampling tests on the cross-category covariance blocks.
    Test {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        test: TestKind,
        /// Permutations or bootstrap draws.
        #[arg(long, default_value_t = 199)]
        draws: usize,
        #[arg(long, default_value = "frobenius")]
        norm: BlockNorm,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicated simulation comparing methods and selection criteria.
    #[command(name = "repro-table1")]
    ReproTable1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let a = cli.global;
    if let Some(jobs) = a.jobs {
        if jobs == 0 {
            return Err(CliError::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Validation(format!("--jobs: {e}")))?;
    }
    let g = Globals {
        seed: a.seed,
        gamma: a.gamma,
        folds: a.folds,
        delta: a.delta,
        max_iter: a.max_iter,
        format: a.format,
    };
    match cli.command {
        Command::Simulate { config, out } => commands::simulate(&g, &config, &out),
        Command::Fit {
            data,
            method,
            lambda,
            lambda1,
            lambda2,
            init,
            out,
        } => {
            let (lambda1, lambda2) = match (lambda, lambda1, lambda2) {
                (Some(l), _, _) => (l, l),
                (None, Some(l1), Some(l2)) => (l1, l2),
                _ => {
                    return Err(CliError::Validation(
                        "give --lambda or both --lambda1 and --lambda2".into(),
                    ))
                }
            };
            commands::fit(
                &g,
                &FitArgs {
                    data,
                    method,
                    lambda1,
                    lambda2,
                    init,
                    out,
                },
            )
        }
        Command::Select {
            data,
            method,
            criterion,
            grid,
            out,
        } => commands::select(
            &g,
            &SelectArgs {
                data,
                method,
                criterion,
                grid,
                out,
            },
        ),
        Command::Evaluate {
            truth,
            estimate,
            out,
        } => commands::evaluate(&g, &truth, &estimate, out.as_deref()),
        Command::Roc { config, out } => commands::roc(&g, &config, &out),
        Command::Test {
            data,
            test,
            draws,
            norm,
            out,
        } => commands::test(&g, &data, test, draws, norm, out.as_deref()),
        Command::ReproTable1 { config, out } => commands::repro_table1(&g, &config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlgem: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
