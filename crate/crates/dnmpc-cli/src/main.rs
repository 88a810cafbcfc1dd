//! Command-line front end: closed-loop benchmark runs, certificate reports,
//! and the terminal-ingredient design.

use clap::{Parser, Subcommand, ValueEnum};
use dnmpc::admm::{AveragingOperator, ExecutionMode};
use dnmpc::cert::{certify_qp, SampleConfig};
use dnmpc::config::{FileConfig, ModelConfig, TerminalConfig};
use dnmpc::dsqp::solve_to_kkt;
use dnmpc::mpc::{cold_start_point, emit_reports, run_closed_loop};
use dnmpc::nlp::assemble_nlp;
use nalgebra::{DMatrix, DVector};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "dnmpc",
    about = "Decentralized real-time NMPC toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Centralized,
    Decentralized,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Execution mode override.
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Output directory for trajectories.csv, optimizer.csv, summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Solve a full-accuracy reference each step and log the optimizer error.
        #[arg(long)]
        reference: bool,
        /// Seed override for the run configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Record the neighbor-to-neighbor message transcript.
        #[arg(long)]
        transcript: bool,
    },
    /// Compute the inner-iteration convergence certificate at the setpoint of
    /// the configured problem.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples drawn around the reference solution.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Sampling-ball radius.
        #[arg(long, default_value_t = 1e-2)]
        radius: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Subproblem accuracy target used for the iteration bound.
        #[arg(long)]
        accuracy: Option<f64>,
    },
    /// Solve the terminal design (cost-to-go blocks, feedback gains, scaling)
    /// for a pendulum-chain configuration and print it as JSON.
    DesignTerminal {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    match Cli::parse().command {
        Command::Run {
            config,
            mode,
            out,
            reference,
            seed,
            transcript,
        } => {
            let mut file = FileConfig::from_path(&config)?;
            if let Some(mode) = mode {
                file.run.mode = match mode {
                    ModeArg::Centralized => ExecutionMode::Centralized,
                    ModeArg::Decentralized => ExecutionMode::Decentralized,
                };
            }
            if let Some(seed) = seed {
                file.run.seed = seed;
            }
            file.run.reference |= reference;
            file.run.record_transcript |= transcript;
            let run_cfg = file.build()?;
            let bound = file.ocp.input_bound;
            let log = run_closed_loop(&run_cfg)?;
            emit_reports(&log, &out, bound)?;
            match (&log.aborted, log.j_cl) {
                (Some(reason), _) => println!(
                    "run aborted: {reason} (partial reports in {})",
                    out.display()
                ),
                (None, Some(j)) => {
                    println!("run complete: J_cl = {j:.4}, reports in {}", out.display())
                }
                _ => println!("run complete, reports in {}", out.display()),
            }
        }
        Command::Certify {
            config,
            out,
            samples,
            radius,
            seed,
            accuracy,
        } => {
            let file = FileConfig::from_path(&config)?;
            let run_cfg = file.build()?;
            let s = run_cfg.spec.model.subsystem_count();
            let x0: Vec<DVector<f64>> = (0..s)
                .map(|i| DVector::zeros(run_cfg.spec.model.state_dim(i)))
                .collect();
            let nlp = assemble_nlp(&run_cfg.spec, &x0)?;
            let op = Arc::new(AveragingOperator::from_coupling(
                &nlp.coupling,
                &nlp.z_offsets,
                nlp.n,
            )?);
            let cold = cold_start_point(&nlp, &x0);
            let (p_star, _) = solve_to_kkt(&nlp, &cold, 1e-10, 100)?;
            let cert = certify_qp(
                &nlp,
                &op,
                &p_star,
                run_cfg.settings.rho,
                &SampleConfig {
                    count: samples,
                    radius,
                    seed,
                },
                accuracy,
            )?;
            let text = serde_json::to_string_pretty(&cert)?;
            std::fs::write(&out, format!("{text}\n"))?;
            println!(
                "certificate written to {}: c1 = {:.4}, c2 = {:.4}, contraction = {:.6}, conclusive = {}",
                out.display(),
                cert.c1,
                cert.c2,
                cert.a_w,
                cert.conclusive
            );
        }
        Command::DesignTerminal { config } => {
            let file = FileConfig::from_path(&config)?;
            let ModelConfig::PendulumChain { count, params } = &file.model else {
                return Err("terminal design requires a pendulum-chain model".into());
            };
            let TerminalConfig::Riccati { mu, .. } = &file.ocp.terminal else {
                return Err("configuration does not request a Riccati terminal design".into());
            };
            let mut p = params
                .clone()
                .unwrap_or_else(|| dnmpc::pendulum::PendulumChainParams::with_count(*count));
            p.count = *count;
            let q = DMatrix::from_diagonal(&DVector::from_vec(file.ocp.q_diag.clone()));
            let r = DMatrix::from_diagonal(&DVector::from_vec(file.ocp.r_diag.clone()));
            let design = dnmpc::pendulum::design_terminal(&p, file.run.delta, &q, &r, *mu)?;
            let report = serde_json::json!({
                "beta2": design.beta2,
                "mu": design.mu,
                "decrease_margin": design.dq_min_eig,
                "cost_to_go": matrix_rows(&design.p_blocks[0]),
                "feedback_gain": matrix_rows(&design.k_blocks[0]),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}
