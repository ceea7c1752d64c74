use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use paramflow::config::RunConfig;
use paramflow::run::Run;
use paramflow::Error;

/// Thread count for the worker pool; unset means one per core.
const THREADS_ENV: &str = "PARAMFLOW_THREADS";

#[derive(Parser)]
#[command(name = "paramflow", version, about = "Evolve neural network parameters to solve initial value PDEs")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides `solver.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Smaller network, fewer samples and shorter horizons.
    #[arg(long, global = true)]
    desk_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the network to the initial condition.
    Fit,
    /// Integrate the parameter ODE (fits first if there is no `theta0.traj`).
    Evolve {
        /// Start from the last checkpoint of this file.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Residual, spectrum or symmetry metrics over a trajectory.
    Diagnose {
        #[arg(value_enum)]
        what: Diagnostic,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Compare a trajectory against the finite-difference solver.
    CompareFd {
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Diagnostic {
    Residual,
    Spectrum,
    Symmetry,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            Err(_) => {
                eprintln!("error: {THREADS_ENV} must be a non-negative integer (got {n:?})");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> paramflow::Result<()> {
    let path = cli.config.ok_or_else(|| Error::Config("--config is required".into()))?;
    let config = RunConfig::load(&path, cli.desk_scale, cli.seed)?;
    let mut run = Run::new(config, &cli.out)?;
    run.verbose = true;
    match cli.command {
        Command::Fit => {
            let (_, report) = run.fit()?;
            println!("final mse {:.6e}", report.final_mse());
        }
        Command::Evolve { from } => {
            let ev = run.evolve(from.as_deref())?;
            let accepted = ev.restarts.iter().filter(|r| r.accepted).count();
            println!(
                "{} steps, {} checkpoints, {}/{} restarts accepted",
                ev.steps.len(),
                ev.trajectory.thetas.len(),
                accepted,
                ev.restarts.len()
            );
        }
        Command::Diagnose { what, trajectory } => {
            let t = trajectory.as_deref();
            match what {
                Diagnostic::Residual => {
                    for r in run.diagnose_residual(t)? {
                        println!("{} {:.6e}", r.t, r.residual);
                    }
                }
                Diagnostic::Spectrum => {
                    for p in run.diagnose_spectrum(t)? {
                        println!("{}", p.display());
                    }
                }
                Diagnostic::Symmetry => {
                    for r in run.diagnose_symmetry(t)? {
                        println!("{} layer {} ratio {:.3e}", r.t, r.layer, r.ratio);
                    }
                }
            }
        }
        Command::CompareFd { trajectory } => {
            for r in run.compare_fd(trajectory.as_deref())? {
                println!(
                    "{} slice {:.4e} volume {:.4e} fd-vs-exact {:.4e} net-vs-exact {:.4e}",
                    r.t, r.slice_discrepancy, r.volume_discrepancy, r.fd_vs_analytic, r.network_vs_analytic
                );
            }
        }
    }
    Ok(())
}
