use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tdhf_control::campaign::{self, Campaign};
use tdhf_control::parallel::{init_thread_pool, Execution};
use tdhf_control::Error;

/// Gradient-check threshold on the maximum per-component relative error.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "tdhfc", version, about = "Neural feedback control of TDHF dynamics")]
struct Cli {
    /// Worker threads for restarts and finite differences (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate one trajectory and write traj.csv and summary.json.
    Propagate {
        #[arg(long)]
        config: PathBuf,
        /// Parameter checkpoint; omitted means zero field.
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the multi-start optimization campaign.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// First seed (overrides opt.seed0).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the adjoint gradient with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of time steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Central-difference step on each parameter.
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
        #[arg(long, hide = true)]
        corrupt_zeta_sign: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Io { .. } => 2,
        Error::NoConvergedRuns => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    init_thread_pool(cli.jobs);
    let exec = Execution::from_jobs(cli.jobs);
    match cli.command {
        Command::Propagate { config, theta, out } => {
            let campaign = Campaign::load(&config)?;
            let theta = match theta {
                Some(path) => Some(campaign::load_theta(&path, &campaign.config.net)?),
                None => None,
            };
            let out_dir = campaign.out_dir(out.as_deref());
            let s = campaign::run_propagate(&campaign, theta, &out_dir)?;
            println!(
                "{}: {} steps, terminal MAE {:.4e}, fidelity {:.6}, alpha {:.4e}",
                s.system, s.n_steps, s.terminal_mae, s.fidelity, s.alpha
            );
            println!(
                "invariants: trace {:.2e}, idempotency {:.2e}, unitarity {:.2e}",
                s.invariants.max_trace_error,
                s.invariants.max_idempotency_error,
                s.invariants.max_unitarity_error
            );
            println!("wrote {}", out_dir.display());
            Ok(0)
        }
        Command::Optimize { config, seed, out } => {
            let campaign = Campaign::load(&config)?;
            let out_dir = campaign.out_dir(out.as_deref());
            let (report, records) = campaign::run_optimize(&campaign, seed, exec, &out_dir)?;
            for r in &records {
                println!(
                    "seed {:>4}  {:<18} iters {:>5}  beta {:.4e}  alpha {:.4e}",
                    r.seed,
                    format!("{:?}", r.stop_reason),
                    r.iters,
                    r.beta,
                    r.alpha
                );
            }
            println!(
                "{}/{} converged; selected seed {} (beta {:.4e}, alpha {:.4e}, {} iterations)",
                report.n_converged, report.n_runs, report.best_seed, report.beta, report.alpha, report.iters
            );
            println!("wrote {}", out_dir.display());
            Ok(0)
        }
        Command::Gradcheck {
            config,
            seed,
            steps,
            fd_step,
            corrupt_zeta_sign,
        } => {
            let campaign = Campaign::load(&config)?;
            let check = campaign::run_gradcheck(&campaign, seed, steps, fd_step, corrupt_zeta_sign, exec)?;
            let pass = check.max_error < GRADCHECK_TOL;
            println!(
                "max relative error {:.3e} at component {}: {}",
                check.max_error,
                check.worst_index,
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(if pass { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
