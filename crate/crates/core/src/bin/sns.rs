use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sns_core::experiments::{run_fit, run_mpc_compare, run_particle_pipeline, run_residual_report, ExperimentConfig};
use sns_core::SnsError;

/// Smooth neural surrogate experiments.
#[derive(Parser)]
#[command(name = "sns", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Fit a single network on relu, piecewise, shape_interp or particle_onestep
    Fit(Common),
    /// Train dynamics and estimator on the particle system
    Particle(Common),
    /// Compare the Gauss–Newton planner and the sampling baseline
    MpcCompare(Common),
    /// Per-dimension Cauchy and Gaussian fits of one-step residuals
    ResidualReport(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn exit_code(e: &SnsError) -> u8 {
    match e {
        SnsError::Config(_) | SnsError::Json(_) => 2,
        SnsError::NonFinite { .. } | SnsError::Factorization { .. } => 3,
        _ => 1,
    }
}

fn init_threads() -> Result<(), SnsError> {
    let Ok(v) = std::env::var("SNS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| SnsError::Config(format!("SNS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SnsError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<String, SnsError> {
    init_threads()?;
    let (Verb::Fit(c) | Verb::Particle(c) | Verb::MpcCompare(c) | Verb::ResidualReport(c)) = &cli.verb;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = &c.out;
    Ok(match &cli.verb {
        Verb::Fit(_) => {
            let s = run_fit(&cfg, out)?;
            format!(
                "fit {:?}: test mse {:.3e}, C {:.4}, empirical Lipschitz {:.4}",
                s.task, s.test_mse, s.c, s.empirical_lipschitz
            )
        }
        Verb::Particle(_) => {
            let r = run_particle_pipeline(&cfg, out)?;
            format!(
                "particle: {} transitions, one-step MAE {:?}, estimator MAE prior {:.4} posterior {:.4}",
                r.transitions, r.one_step_mae, r.estimator_prior_mae, r.estimator_posterior_mae
            )
        }
        Verb::MpcCompare(_) => {
            let r = run_mpc_compare(&cfg, out)?;
            format!(
                "mpc-compare: {} rows, GGN no worse on {}/{} seeds, {} monotonicity violations",
                r.rows.len(),
                r.ggn_wins,
                r.seeds,
                r.total_monotone_violations
            )
        }
        Verb::ResidualReport(_) => {
            let rows = run_residual_report(&cfg, out)?;
            let best: Vec<&str> = rows.iter().map(|r| r.best().unwrap_or("degenerate")).collect();
            format!("residual-report: best fit per dimension {best:?}")
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
