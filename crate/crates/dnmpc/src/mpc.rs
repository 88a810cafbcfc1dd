//! Closed-loop harness: per-step state sampling, warm-started solver call,
//! input extraction, plant integration, logging, and report emission.
//!
//! The plant integrates the fully coupled continuous dynamics, while the
//! controller's prediction model freezes neighbor positions over each
//! shooting step; the mismatch between the two is part of the benchmark.

use crate::admm::{AveragingOperator, ExecutionMode};
use crate::bus::{MessageStats, RoundBus};
use crate::dsqp::{dsqp_run, solve_to_kkt, DsqpRunConfig, DsqpSettings, DsqpState};
use crate::nlp::{assemble_nlp, NlpError, OcpSpec, PartitionedNlp, PrimalDualPoint};
use nalgebra::DVector;
use serde::Serialize;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error("first-step reference solve failed: {0}")]
    Initialization(String),
    #[error("applied input violates its bound at t = {t:.3}: |{value:.6}| > {bound} + 1e-6")]
    InputBound { t: f64, value: f64, bound: f64 },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub struct RunConfig {
    pub label: String,
    pub spec: OcpSpec,
    pub x0: Vec<DVector<f64>>,
    /// Control sampling interval.
    pub delta: f64,
    /// Simulated time span.
    pub t_final: f64,
    pub settings: DsqpSettings,
    pub mode: ExecutionMode,
    pub seed: u64,
    /// Compute a full-accuracy reference solution each step and log the
    /// optimizer error against it.
    pub reference: bool,
    pub record_transcript: bool,
    /// Per-component state names used in report headers.
    pub state_names: Vec<String>,
}

impl RunConfig {
    fn validate(&self) -> Result<(), RunError> {
        if self.delta <= 0.0 || self.t_final < self.delta {
            return Err(RunError::InvalidConfig(
                "need delta > 0 and t_final >= delta".into(),
            ));
        }
        if !self.settings.validate() {
            return Err(RunError::InvalidConfig("invalid solver settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummaryConfig {
    pub label: String,
    pub subsystems: usize,
    pub horizon: usize,
    pub shooting_interval: f64,
    pub delta: f64,
    pub t_final: f64,
    pub k_max: usize,
    pub l_max: usize,
    pub rho: f64,
    pub hessian_mode: crate::dsqp::HessianMode,
    pub mode: ExecutionMode,
    pub seed: u64,
    pub beta: f64,
    pub beta2: f64,
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub stage_cost: f64,
    pub optimizer_error: Option<f64>,
    pub solve_seconds: f64,
}

pub struct ClosedLoopLog {
    pub steps: Vec<StepLog>,
    pub j_cl: Option<f64>,
    pub aborted: Option<String>,
    pub message_stats: MessageStats,
    pub summary_config: RunSummaryConfig,
    pub state_names: Vec<String>,
    pub input_dims: Vec<usize>,
    pub state_dims: Vec<usize>,
    pub transcript: Option<Vec<crate::bus::MessageRecord>>,
}

/// Selects the first input block of every subsystem from the stacked primal
/// vector: a pure index selection, no arithmetic.
pub fn extract_input(nlp: &PartitionedNlp, z: &DVector<f64>) -> DVector<f64> {
    let layouts = nlp
        .ocp_layout
        .as_ref()
        .expect("input extraction requires an assembled optimal control problem");
    let n_u: usize = layouts.iter().map(|l| l.n_u).sum();
    let mut u = DVector::zeros(n_u);
    let mut k = 0;
    for (i, layout) in layouts.iter().enumerate() {
        for c in 0..layout.n_u {
            u[k] = z[nlp.z_offsets[i] + layout.input_offset(0) + c];
            k += 1;
        }
    }
    u
}

/// Shooting-trajectory initial guess replicating the measured state, with
/// copies set to the owning neighbor's value.
pub fn cold_start_point(nlp: &PartitionedNlp, x_now: &[DVector<f64>]) -> PrimalDualPoint {
    let layouts = nlp.ocp_layout.as_ref().expect("assembled problem");
    let mut p = PrimalDualPoint::zeros(nlp);
    for (i, layout) in layouts.iter().enumerate() {
        for stage in 0..=layout.horizon {
            for c in 0..layout.n_x {
                p.z[nlp.z_offsets[i] + layout.state_offset(stage) + c] = x_now[i][c];
            }
        }
        for (b, block) in layout.copy_blocks.iter().enumerate() {
            for stage in 0..layout.copy_stages {
                for (k, &comp) in block.components.iter().enumerate() {
                    p.z[nlp.z_offsets[i] + layout.copy_offset(b, stage) + k] =
                        x_now[block.neighbor][comp];
                }
            }
        }
    }
    p
}

fn stage_cost(spec: &OcpSpec, x: &[DVector<f64>], u: &DVector<f64>) -> f64 {
    let mut cost = 0.0;
    let mut uk = 0;
    for i in 0..x.len() {
        cost += 0.5 * (&spec.q_weights[i] * &x[i]).dot(&x[i]);
        let n_u = spec.model.input_dim(i);
        if n_u > 0 {
            let u_i = u.rows(uk, n_u).into_owned();
            cost += 0.5 * (&spec.r_weights[i] * &u_i).dot(&u_i);
            uk += n_u;
        }
    }
    cost
}

fn split_state(spec: &OcpSpec, x: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(spec.model.subsystem_count());
    let mut k = 0;
    for i in 0..spec.model.subsystem_count() {
        let d = spec.model.state_dim(i);
        out.push(x.rows(k, d).into_owned());
        k += d;
    }
    out
}

/// Runs the closed loop: at every sampling instant the solver is warm
/// started from the previous step's iterate (the first step is initialized
/// at a full-accuracy reference solution), the first input is applied, and
/// the coupled plant is integrated over one sampling interval.
pub fn run_closed_loop(cfg: &RunConfig) -> Result<ClosedLoopLog, RunError> {
    cfg.validate()?;
    let spec = &cfg.spec;
    let s_count = spec.model.subsystem_count();
    let t_n = (cfg.t_final / cfg.delta).round() as usize;

    let mut x_parts = cfg.x0.clone();
    let mut x_stacked = stack(&x_parts);

    let first = assemble_nlp(spec, &x_parts)?;
    let op = Arc::new(
        AveragingOperator::from_coupling(&first.coupling, &first.z_offsets, first.n)
            .map_err(|e| RunError::InvalidConfig(e.to_string()))?,
    );

    // first step: initialize at a reference solution
    let cold = cold_start_point(&first, &x_parts);
    let (p_init, _) = solve_to_kkt(&first, &cold, cfg.settings.qp_tol.max(1e-8), 200)
        .map_err(|e| RunError::Initialization(e.to_string()))?;
    let mut first_nlp = Some(first);
    let mut state = DsqpState::from_point(&op, &p_init);
    let mut reference_point = cfg.reference.then(|| p_init.clone());

    let mut bus = RoundBus::new(cfg.record_transcript);
    let mut steps: Vec<StepLog> = Vec::with_capacity(t_n + 1);
    let mut aborted = None;

    let input_dims: Vec<usize> = (0..s_count).map(|i| spec.model.input_dim(i)).collect();
    let state_dims: Vec<usize> = (0..s_count).map(|i| spec.model.state_dim(i)).collect();

    for t_idx in 0..=t_n {
        let t = t_idx as f64 * cfg.delta;
        let nlp = match first_nlp.take() {
            Some(nlp) => nlp,
            None => assemble_nlp(spec, &x_parts)?,
        };

        let started = Instant::now();
        let run_cfg = DsqpRunConfig {
            mode: cfg.mode,
            bus: matches!(cfg.mode, ExecutionMode::Decentralized).then_some(&mut bus),
            reference: None,
            trace: None,
        };
        let out = match dsqp_run(&nlp, &op, &state, &cfg.settings, run_cfg) {
            Ok(out) => out,
            Err(e) => {
                aborted = Some(format!("solver failed at t = {t:.3}: {e}"));
                break;
            }
        };
        let solve_seconds = started.elapsed().as_secs_f64();
        state = out.state.clone();

        let u = extract_input(&nlp, &state.z);
        // applied inputs are decision variables; enforce their bounds
        let mut uk = 0;
        for i in 0..s_count {
            if let Some((lo, hi)) = &spec.input_bounds[i] {
                for c in 0..input_dims[i] {
                    let v = u[uk + c];
                    if v > hi[c] + 1e-6 || v < lo[c] - 1e-6 {
                        return Err(RunError::InputBound {
                            t,
                            value: v,
                            bound: hi[c],
                        });
                    }
                }
            }
            uk += input_dims[i];
        }

        let optimizer_error = match (&mut reference_point, cfg.reference) {
            (Some(prev), true) => {
                match solve_to_kkt(&nlp, prev, cfg.settings.qp_tol.max(1e-8), 100) {
                    Ok((p_star, _)) => {
                        let err = out.point().distance(&p_star);
                        *prev = p_star;
                        Some(err)
                    }
                    Err(_) => None,
                }
            }
            _ => None,
        };

        steps.push(StepLog {
            t,
            x: x_stacked.clone(),
            u: u.clone(),
            stage_cost: stage_cost(spec, &x_parts, &u),
            optimizer_error,
            solve_seconds,
        });

        if t_idx < t_n {
            let x_next = spec.model.plant_step(&x_stacked, &u, cfg.delta);
            if x_next.iter().any(|v| !v.is_finite()) {
                aborted = Some(format!("plant state diverged at t = {t:.3}"));
                break;
            }
            x_stacked = x_next;
            x_parts = split_state(spec, &x_stacked);
        }
    }

    let j_cl = if aborted.is_none() && !steps.is_empty() {
        Some(steps.iter().map(|s| s.stage_cost).sum::<f64>() / steps.len() as f64)
    } else {
        None
    };

    Ok(ClosedLoopLog {
        steps,
        j_cl,
        aborted,
        message_stats: bus.stats,
        summary_config: RunSummaryConfig {
            label: cfg.label.clone(),
            subsystems: s_count,
            horizon: spec.horizon,
            shooting_interval: spec.shooting_interval,
            delta: cfg.delta,
            t_final: cfg.t_final,
            k_max: cfg.settings.k_max,
            l_max: cfg.settings.l_max,
            rho: cfg.settings.rho,
            hessian_mode: cfg.settings.hessian_mode,
            mode: cfg.mode,
            seed: cfg.seed,
            beta: spec.beta,
            beta2: spec.beta2,
        },
        state_names: cfg.state_names.clone(),
        input_dims,
        state_dims,
        transcript: bus.transcript,
    })
}

fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut k = 0;
    for p in parts {
        out.rows_mut(k, p.len()).copy_from(p);
        k += p.len();
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    j_cl: Option<f64>,
    aborted: &'a Option<String>,
    steps: usize,
    max_abs_input: f64,
    min_input_bound_slack: Option<f64>,
    final_state: Vec<f64>,
    message_stats: MessageStats,
    config: &'a RunSummaryConfig,
}

/// Writes `trajectories.csv` (time, full per-subsystem states, inputs),
/// `optimizer.csv` (time, reference distance; only when recorded), and
/// `summary.json`.
pub fn emit_reports(
    log: &ClosedLoopLog,
    out_dir: &std::path::Path,
    input_bound: Option<f64>,
) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir).map_err(|e| RunError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let wrap = |path: std::path::PathBuf| {
        move |e: std::io::Error| RunError::Io {
            path: path.display().to_string(),
            source: e,
        }
    };

    // trajectories
    let path = out_dir.join("trajectories.csv");
    let mut f = std::fs::File::create(&path).map_err(wrap(path.clone()))?;
    let mut header = vec!["t".to_string()];
    for (i, &d) in log.state_dims.iter().enumerate() {
        for c in 0..d {
            let name = log
                .state_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("x{c}"));
            header.push(format!("s{i}_{name}"));
        }
    }
    for (i, &d) in log.input_dims.iter().enumerate() {
        for c in 0..d {
            if d == 1 {
                header.push(format!("u{i}"));
            } else {
                header.push(format!("u{i}_{c}"));
            }
        }
    }
    writeln!(f, "{}", header.join(",")).map_err(wrap(path.clone()))?;
    for step in &log.steps {
        let mut row = vec![format!("{}", step.t)];
        row.extend(step.x.iter().map(|v| format!("{v:.17e}")));
        row.extend(step.u.iter().map(|v| format!("{v:.17e}")));
        writeln!(f, "{}", row.join(",")).map_err(wrap(path.clone()))?;
    }

    // optimizer error
    if log.steps.iter().any(|s| s.optimizer_error.is_some()) {
        let path = out_dir.join("optimizer.csv");
        let mut f = std::fs::File::create(&path).map_err(wrap(path.clone()))?;
        writeln!(f, "t,optimizer_error").map_err(wrap(path.clone()))?;
        for step in &log.steps {
            if let Some(err) = step.optimizer_error {
                writeln!(f, "{},{err:.17e}", step.t).map_err(wrap(path.clone()))?;
            }
        }
    }

    // summary
    let max_abs_input = log
        .steps
        .iter()
        .flat_map(|s| s.u.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let summary = Summary {
        j_cl: log.j_cl,
        aborted: &log.aborted,
        steps: log.steps.len(),
        max_abs_input,
        min_input_bound_slack: input_bound.map(|b| b - max_abs_input),
        final_state: log
            .steps
            .last()
            .map(|s| s.x.iter().cloned().collect())
            .unwrap_or_default(),
        message_stats: log.message_stats,
        config: &log.summary_config,
    };
    let path = out_dir.join("summary.json");
    let mut f = std::fs::File::create(&path).map_err(wrap(path.clone()))?;
    serde_json::to_writer_pretty(&mut f, &summary).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    writeln!(f).map_err(wrap(path.clone()))?;

    // transcript, when recorded
    if let Some(records) = &log.transcript {
        let path = out_dir.join("messages.jsonl");
        let f = std::fs::File::create(&path).map_err(wrap(path.clone()))?;
        crate::bus::write_records(records, f).map_err(wrap(path))?;
    }
    Ok(())
}

/// Time-averaged closed-loop stage cost over the logged steps.
pub fn j_cl_of(steps: &[StepLog]) -> Option<f64> {
    if steps.is_empty() {
        return None;
    }
    Some(steps.iter().map(|s| s.stage_cost).sum::<f64>() / steps.len() as f64)
}
