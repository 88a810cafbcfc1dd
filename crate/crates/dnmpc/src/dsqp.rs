//! Bi-level solver: outer quadratic approximations of the partitioned NLP,
//! inner consensus ADMM with a fixed per-outer-iteration budget. Also hosts
//! the centralized full-accuracy variant used to produce reference solutions
//! and first-step initializations, and a regularity diagnostic.

use crate::admm::{
    admm_run, solve_stacked_qp, AdmmError, AdmmOptions, AdmmState, AdmmSubproblem,
    AveragingOperator, ExecutionMode, LocalQpData, SplitQpData,
};
use crate::bus::RoundBus;
use crate::linalg::{min_eig_symmetric, null_space_basis};
use crate::nlp::{kkt_residual, PartitionedNlp, PrimalDualPoint};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DsqpError {
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
    #[error("derivative evaluation produced a non-finite value in subsystem {0}")]
    EvaluationFailure(usize),
    #[error("no least-squares Hessian available for subsystem {0}")]
    GaussNewtonUnavailable(usize),
    #[error("iterates diverged (non-finite) at outer iteration {0}")]
    Diverged(usize),
    #[error("KKT residual {residual:.3e} above tolerance after {iterations} iterations")]
    MaxIterations {
        residual: f64,
        iterations: usize,
        best: Box<PrimalDualPoint>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Exact,
    GaussNewton,
    /// Exact Hessian when it is positive definite (Cholesky with margin
    /// `reg_floor` succeeds), least-squares approximation otherwise.
    Auto,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DsqpSettings {
    pub k_max: usize,
    pub l_max: usize,
    pub rho: f64,
    pub hessian_mode: HessianMode,
    pub qp_tol: f64,
    pub reg_floor: f64,
}

impl DsqpSettings {
    pub fn new(k_max: usize, l_max: usize) -> Self {
        Self {
            k_max,
            l_max,
            rho: 1.0,
            hessian_mode: HessianMode::Auto,
            qp_tol: 1e-8,
            reg_floor: 1e-8,
        }
    }

    pub fn validate(&self) -> bool {
        self.k_max >= 1 && self.l_max >= 1 && self.rho > 0.0 && self.qp_tol > 0.0
    }
}

/// Per-subsystem derivative data of the quadratic approximation at one
/// primal-dual point.
pub struct QpLinearization {
    pub z_ref: DVector<f64>,
    pub h_blocks: Vec<DMatrix<f64>>,
    pub grad_blocks: Vec<DVector<f64>>,
    pub g_vals: Vec<DVector<f64>>,
    pub g_jacs: Vec<DMatrix<f64>>,
    pub h_vals: Vec<DVector<f64>>,
    pub h_jacs: Vec<DMatrix<f64>>,
    /// Mode actually used per subsystem (relevant under `Auto`).
    pub modes: Vec<HessianMode>,
}

impl QpLinearization {
    /// Local QP blocks of the subproblem in the splitting form.
    pub fn to_locals(&self, nlp: &PartitionedNlp) -> Vec<LocalQpData> {
        (0..nlp.subsystem_count())
            .map(|i| {
                let z_i = nlp.z_slice(&self.z_ref, i);
                let q0 = &self.grad_blocks[i] - &self.h_blocks[i] * &z_i;
                let b_eq = &self.g_jacs[i] * &z_i - &self.g_vals[i];
                let b_in = &self.h_jacs[i] * &z_i - &self.h_vals[i];
                LocalQpData {
                    h: self.h_blocks[i].clone(),
                    q0,
                    a_eq: self.g_jacs[i].clone(),
                    b_eq,
                    a_in: self.h_jacs[i].clone(),
                    b_in,
                }
            })
            .collect()
    }
}

/// Evaluates the derivative data for the quadratic subproblem at `p`.
pub fn build_qp(
    nlp: &PartitionedNlp,
    p: &PrimalDualPoint,
    mode: HessianMode,
    reg_floor: f64,
) -> Result<QpLinearization, DsqpError> {
    let s = nlp.subsystem_count();
    let mut lin = QpLinearization {
        z_ref: p.z.clone(),
        h_blocks: Vec::with_capacity(s),
        grad_blocks: Vec::with_capacity(s),
        g_vals: Vec::with_capacity(s),
        g_jacs: Vec::with_capacity(s),
        h_vals: Vec::with_capacity(s),
        h_jacs: Vec::with_capacity(s),
        modes: Vec::with_capacity(s),
    };
    for i in 0..s {
        let sub = &nlp.subsystems[i];
        let z_i = nlp.z_slice(&p.z, i);
        let nu_i = nlp.nu_slice(&p.nu, i);
        let mu_i = nlp.mu_slice(&p.mu, i);
        let f = &sub.functions;
        let grad = f.gradient(&z_i);
        let g = f.eq(&z_i);
        let jg = f.eq_jacobian(&z_i);
        let h = f.ineq(&z_i);
        let jh = f.ineq_jacobian(&z_i);

        let exact = || {
            let raw = f.lagrangian_hessian(&z_i, &nu_i, &mu_i);
            (&raw + raw.transpose()) * 0.5
        };
        let gauss_newton = || {
            sub.gauss_newton
                .as_ref()
                .map(|gn| gn.hessian.clone())
                .ok_or(DsqpError::GaussNewtonUnavailable(i))
        };
        let (h_i, used) = match mode {
            HessianMode::Exact => (exact(), HessianMode::Exact),
            HessianMode::GaussNewton => (gauss_newton()?, HessianMode::GaussNewton),
            HessianMode::Auto => {
                let cand = exact();
                if cholesky_ok(&cand, reg_floor) {
                    (cand, HessianMode::Exact)
                } else {
                    (gauss_newton()?, HessianMode::GaussNewton)
                }
            }
        };

        let finite = grad.iter().all(|v| v.is_finite())
            && g.iter().all(|v| v.is_finite())
            && jg.iter().all(|v| v.is_finite())
            && h.iter().all(|v| v.is_finite())
            && jh.iter().all(|v| v.is_finite())
            && h_i.iter().all(|v| v.is_finite());
        if !finite {
            return Err(DsqpError::EvaluationFailure(i));
        }

        lin.h_blocks.push(h_i);
        lin.grad_blocks.push(grad);
        lin.g_vals.push(g);
        lin.g_jacs.push(jg);
        lin.h_vals.push(h);
        lin.h_jacs.push(jh);
        lin.modes.push(used);
    }
    Ok(lin)
}

fn cholesky_ok(h: &DMatrix<f64>, floor: f64) -> bool {
    let shifted = h - DMatrix::identity(h.nrows(), h.ncols()) * floor;
    nalgebra::Cholesky::new(shifted).is_some()
}

/// Warm-start payload carried between calls: primal-dual estimates plus the
/// scaled consensus dual and the last local active sets.
#[derive(Clone, Debug)]
pub struct DsqpState {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub gamma: DVector<f64>,
    pub active_sets: Vec<Vec<usize>>,
}

impl DsqpState {
    /// Initial state from a primal-dual point, with `gamma = E' lambda`.
    pub fn from_point(op: &AveragingOperator, p: &PrimalDualPoint) -> Self {
        Self {
            z: p.z.clone(),
            nu: p.nu.clone(),
            mu: p.mu.clone(),
            gamma: op.apply_e_t(&p.lambda),
            active_sets: Vec::new(),
        }
    }

    pub fn to_point(&self, op: &AveragingOperator, rho: f64) -> PrimalDualPoint {
        PrimalDualPoint {
            z: self.z.clone(),
            nu: self.nu.clone(),
            mu: self.mu.clone(),
            lambda: op.recover_lambda(&(&self.gamma / rho), rho),
        }
    }
}

pub struct DsqpRunConfig<'a> {
    pub mode: ExecutionMode,
    pub bus: Option<&'a mut RoundBus>,
    /// Reference solution for per-iteration error capture.
    pub reference: Option<&'a PrimalDualPoint>,
    /// Per-iteration trace rows `(k, l, consensus_residual, ref_distance)`.
    pub trace: Option<&'a mut Vec<TraceRow>>,
}

impl Default for DsqpRunConfig<'_> {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Centralized,
            bus: None,
            reference: None,
            trace: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub l: usize,
    pub consensus_residual: f64,
    pub kkt_residual: f64,
    pub reference_distance: f64,
}

/// Writes trace rows as CSV with a header line.
pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "k,l,consensus_residual,kkt_residual,reference_distance")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.17e},{:.17e},{:.17e}",
            r.k, r.l, r.consensus_residual, r.kkt_residual, r.reference_distance
        )?;
    }
    Ok(())
}

pub struct DsqpOutput {
    pub state: DsqpState,
    /// Coupling multiplier recovered from the final scaled dual.
    pub lambda: DVector<f64>,
    /// `|p^k - reference|` after every outer iteration, when a reference was
    /// supplied.
    pub history: Vec<f64>,
}

impl DsqpOutput {
    pub fn point(&self) -> PrimalDualPoint {
        PrimalDualPoint {
            z: self.state.z.clone(),
            nu: self.state.nu.clone(),
            mu: self.state.mu.clone(),
            lambda: self.lambda.clone(),
        }
    }
}

/// Runs `k_max` outer iterations, each solving the local quadratic
/// approximation with exactly `l_max` inner consensus iterations, warm
/// starting everything from `state`.
pub fn dsqp_run(
    nlp: &PartitionedNlp,
    op: &Arc<AveragingOperator>,
    state: &DsqpState,
    settings: &DsqpSettings,
    mut run_cfg: DsqpRunConfig<'_>,
) -> Result<DsqpOutput, DsqpError> {
    assert!(settings.validate(), "invalid solver settings");
    let mut z = state.z.clone();
    let mut nu = state.nu.clone();
    let mut mu = state.mu.clone();
    let mut gamma = state.gamma.clone();
    let mut active = state.active_sets.clone();
    let mut history = Vec::new();

    for k in 0..settings.k_max {
        let p_k = PrimalDualPoint {
            z: z.clone(),
            nu: nu.clone(),
            mu: mu.clone(),
            lambda: op.recover_lambda(&(&gamma / settings.rho), settings.rho),
        };
        if !p_k.is_finite() {
            return Err(DsqpError::Diverged(k));
        }
        let lin = build_qp(nlp, &p_k, settings.hessian_mode, settings.reg_floor)?;
        let locals = lin.to_locals(nlp);
        let sub = AdmmSubproblem::new(locals, settings.rho, op.clone())?;

        let opts = AdmmOptions {
            l_max: settings.l_max,
            mode: run_cfg.mode,
            qp_tol: settings.qp_tol,
        };
        let mut trace_rows: Vec<(usize, f64)> = Vec::new();
        let mut observer = |l: usize, st: &AdmmState| {
            if run_cfg.trace.is_some() {
                let res = if sub.n_c() > 0 {
                    (sub.op.apply_e(&st.z) - &sub.op.c).abs().max()
                } else {
                    0.0
                };
                trace_rows.push((l, res));
            }
        };
        let out: AdmmState = admm_run(
            &sub,
            &z,
            &gamma,
            &opts,
            run_cfg.bus.as_deref_mut(),
            Some(&mut observer),
            (!active.is_empty()).then_some(active.as_slice()),
        )?;

        z = out.z;
        nu = out.nu;
        mu = out.mu;
        gamma = out.gamma;
        active = out.active_sets;

        let p_next = PrimalDualPoint {
            z: z.clone(),
            nu: nu.clone(),
            mu: mu.clone(),
            lambda: op.recover_lambda(&(&gamma / settings.rho), settings.rho),
        };
        if !p_next.is_finite() {
            return Err(DsqpError::Diverged(k));
        }
        if let Some(reference) = run_cfg.reference {
            history.push(p_next.distance(reference));
        }
        if let Some(trace) = run_cfg.trace.as_deref_mut() {
            let kkt = kkt_residual(nlp, &p_next);
            let dist = run_cfg
                .reference
                .map(|r| p_next.distance(r))
                .unwrap_or(f64::NAN);
            for (l, res) in trace_rows {
                trace.push(TraceRow {
                    k,
                    l,
                    consensus_residual: res,
                    kkt_residual: kkt,
                    reference_distance: dist,
                });
            }
        }
    }

    let lambda = op.recover_lambda(&(&gamma / settings.rho), settings.rho);
    Ok(DsqpOutput {
        state: DsqpState {
            z,
            nu,
            mu,
            gamma,
            active_sets: active,
        },
        lambda,
        history,
    })
}

pub struct OracleStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Centralized reference solver: builds the quadratic subproblem with the
/// automatic Hessian rule and solves it exactly through the partitioned
/// saddle system, iterating until the NLP KKT residual meets `tol`. Serves
/// as the reference-solution generator and first-step initializer.
///
/// Steps are full by default; when a full step would grow the KKT residual,
/// the step is backtracked along the subproblem direction (far-from-solution
/// swing-up instances need this to reach any stationary point at all).
pub fn solve_to_kkt(
    nlp: &PartitionedNlp,
    p0: &PrimalDualPoint,
    tol: f64,
    max_outer: usize,
) -> Result<(PrimalDualPoint, OracleStats), DsqpError> {
    let mut p = p0.clone();
    let mut best = p.clone();
    let mut best_res = f64::INFINITY;
    let mut warm: Option<Vec<usize>> = None;
    let settings = DsqpSettings::new(1, 1);
    let mut res = kkt_residual(nlp, &p);
    let mut stalled = 0usize;

    for it in 0..max_outer {
        if res < best_res {
            best_res = res;
            best = p.clone();
        }
        if res <= tol {
            return Ok((
                p,
                OracleStats {
                    iterations: it,
                    residual: res,
                },
            ));
        }
        let lin = build_qp(nlp, &p, HessianMode::Auto, settings.reg_floor)?;
        let data = SplitQpData::new(lin.to_locals(nlp));
        let sol = solve_stacked_qp(&data, &nlp.coupling, warm.as_deref(), settings.qp_tol)?;
        let mut warm_rows = Vec::new();
        for (i, rows) in sol.active_sets.iter().enumerate() {
            for &r in rows {
                warm_rows.push(data.h_offsets[i] + r);
            }
        }
        warm = Some(warm_rows);
        let candidate = PrimalDualPoint {
            z: sol.z,
            nu: sol.nu,
            mu: sol.mu,
            lambda: sol.lambda,
        };
        if !candidate.is_finite() {
            return Err(DsqpError::Diverged(it));
        }

        // full step when it reduces the residual, otherwise backtrack and
        // fall back to the best trial seen
        let mut fallback: Option<(PrimalDualPoint, f64)> = None;
        let mut accepted = None;
        for alpha in [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125] {
            let trial = PrimalDualPoint {
                z: &p.z + (&candidate.z - &p.z) * alpha,
                nu: &p.nu + (&candidate.nu - &p.nu) * alpha,
                mu: &p.mu + (&candidate.mu - &p.mu) * alpha,
                lambda: &p.lambda + (&candidate.lambda - &p.lambda) * alpha,
            };
            let trial_res = kkt_residual(nlp, &trial);
            if trial_res < res * (1.0 - 0.1 * alpha) {
                accepted = Some((trial, trial_res));
                break;
            }
            if fallback.as_ref().map_or(true, |(_, r)| trial_res < *r) {
                fallback = Some((trial, trial_res));
            }
        }
        let (next, next_res) = accepted.or(fallback).expect("at least one trial evaluated");
        stalled = if next_res >= res { stalled + 1 } else { 0 };
        p = next;
        res = next_res;
        if stalled > 25 {
            break;
        }
    }
    if res <= tol {
        return Ok((
            p,
            OracleStats {
                iterations: max_outer,
                residual: res,
            },
        ));
    }
    if res < best_res {
        best_res = res;
        best = p;
    }
    Err(DsqpError::MaxIterations {
        residual: best_res,
        iterations: max_outer,
        best: Box::new(best),
    })
}

/// Regularity diagnostics at an approximate solution: strict complementarity
/// margin, the smallest singular value of the stacked active-constraint
/// Jacobian, and the smallest reduced-Hessian eigenvalue per subsystem.
#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub strict_complementarity_margin: f64,
    pub active_counts: Vec<usize>,
    pub licq_min_singular_value: f64,
    pub reduced_hessian_min_eigs: Vec<f64>,
}

pub fn check_regularity(
    nlp: &PartitionedNlp,
    p_star: &PrimalDualPoint,
    activation_tol: f64,
) -> RegularityReport {
    let s = nlp.subsystem_count();
    let mut margin = f64::INFINITY;
    let mut active_counts = Vec::with_capacity(s);
    let mut active_rows: Vec<(usize, usize)> = Vec::new();
    for i in 0..s {
        let z_i = nlp.z_slice(&p_star.z, i);
        let mu_i = nlp.mu_slice(&p_star.mu, i);
        let h = nlp.subsystems[i].functions.ineq(&z_i);
        let mut count = 0;
        for j in 0..h.len() {
            margin = margin.min(h[j].abs() + mu_i[j].abs());
            if h[j] >= -activation_tol {
                count += 1;
                active_rows.push((i, j));
            }
        }
        active_counts.push(count);
    }
    if nlp.n_h == 0 {
        margin = f64::INFINITY;
    }

    // stacked Jacobian: subsystem equality blocks, active inequality rows,
    // and the coupling rows
    let n_active = active_rows.len();
    let rows = nlp.n_g + n_active + nlp.n_c();
    let mut stacked = DMatrix::zeros(rows, nlp.n);
    for i in 0..s {
        let z_i = nlp.z_slice(&p_star.z, i);
        let jg = nlp.subsystems[i].functions.eq_jacobian(&z_i);
        stacked
            .view_mut(
                (nlp.g_offsets[i], nlp.z_offsets[i]),
                (nlp.subsystems[i].eq_dim, nlp.subsystems[i].dim),
            )
            .copy_from(&jg);
    }
    for (k, &(i, j)) in active_rows.iter().enumerate() {
        let z_i = nlp.z_slice(&p_star.z, i);
        let jh = nlp.subsystems[i].functions.ineq_jacobian(&z_i);
        for c in 0..nlp.subsystems[i].dim {
            stacked[(nlp.n_g + k, nlp.z_offsets[i] + c)] = jh[(j, c)];
        }
    }
    let e = nlp.dense_coupling();
    stacked
        .view_mut((nlp.n_g + n_active, 0), (nlp.n_c(), nlp.n))
        .copy_from(&e);
    let licq_min_singular_value = if rows == 0 {
        f64::INFINITY
    } else {
        stacked.svd(false, false).singular_values.min()
    };

    let mut reduced_eigs = Vec::with_capacity(s);
    for i in 0..s {
        let z_i = nlp.z_slice(&p_star.z, i);
        let nu_i = nlp.nu_slice(&p_star.nu, i);
        let mu_i = nlp.mu_slice(&p_star.mu, i);
        let h = nlp.subsystems[i]
            .functions
            .lagrangian_hessian(&z_i, &nu_i, &mu_i);
        let h = (&h + h.transpose()) * 0.5;
        let jg = nlp.subsystems[i].functions.eq_jacobian(&z_i);
        let zbasis = null_space_basis(&jg, 1e-12);
        if zbasis.ncols() == 0 {
            reduced_eigs.push(f64::INFINITY);
        } else {
            let reduced = zbasis.transpose() * &h * &zbasis;
            reduced_eigs.push(min_eig_symmetric(&reduced));
        }
    }

    RegularityReport {
        strict_complementarity_margin: margin,
        active_counts,
        licq_min_singular_value,
        reduced_hessian_min_eigs: reduced_eigs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, standard_normal};
    use crate::nlp::{Coupling, QuadraticSubsystem};

    /// Two coupled quadratic subsystems with one nonlinear equality each.
    fn toy_nonlinear_nlp() -> PartitionedNlp {
        struct Curved {
            target: f64,
        }
        impl crate::nlp::SubsystemFunctions for Curved {
            fn objective(&self, z: &DVector<f64>) -> f64 {
                0.5 * ((z[0] - self.target).powi(2) + z[1].powi(2) + z[2].powi(2))
            }
            fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![z[0] - self.target, z[1], z[2]])
            }
            fn lagrangian_hessian(
                &self,
                z: &DVector<f64>,
                nu: &DVector<f64>,
                _mu: &DVector<f64>,
            ) -> DMatrix<f64> {
                let mut h = DMatrix::identity(3, 3);
                h[(0, 0)] += nu[0] * (-z[0].sin());
                h
            }
            fn eq(&self, z: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![z[1] - z[0].sin()])
            }
            fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(1, 3, &[-z[0].cos(), 1.0, 0.0])
            }
            fn ineq(&self, _z: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(0, 3)
            }
        }
        let sub = |target: f64, index: usize| crate::nlp::SubsystemProblem {
            index,
            dim: 3,
            eq_dim: 1,
            ineq_dim: 0,
            functions: Box::new(Curved { target }),
            gauss_newton: None,
        };
        // third variable of each subsystem is a copy of the other's first
        let coupling = Coupling {
            n_c: 2,
            c: DVector::zeros(2),
            blocks: vec![
                vec![(0, 0, 1.0), (1, 2, -1.0)],
                vec![(1, 0, 1.0), (0, 2, -1.0)],
            ],
            pairs: vec![(0, 5), (3, 2)],
            groups: vec![vec![0, 5], vec![3, 2]],
        };
        PartitionedNlp::new(vec![sub(0.6, 0), sub(-0.4, 1)], coupling).unwrap()
    }

    fn shared_op(nlp: &PartitionedNlp) -> Arc<AveragingOperator> {
        Arc::new(AveragingOperator::from_coupling(&nlp.coupling, &nlp.z_offsets, nlp.n).unwrap())
    }

    #[test]
    fn oracle_converges_on_toy_problem() {
        let nlp = toy_nonlinear_nlp();
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (p_star, stats) = solve_to_kkt(&nlp, &p0, 1e-10, 50).unwrap();
        assert!(stats.residual <= 1e-10);
        assert!(kkt_residual(&nlp, &p_star) <= 1e-10);
    }

    #[test]
    fn oracle_single_iteration_on_quadratic() {
        // a convex QP-as-NLP is solved by one exact subproblem
        let mut rng = seeded_rng(3);
        let a = DMatrix::from_fn(3, 3, |_, _| standard_normal(&mut rng));
        let hess = &a * a.transpose() + DMatrix::identity(3, 3);
        let sub = QuadraticSubsystem {
            hess,
            lin: DVector::from_vec(vec![1.0, -2.0, 0.5]),
            a_eq: DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]),
            b_eq: DVector::from_element(1, 1.0),
            a_in: DMatrix::zeros(0, 3),
            b_in: DVector::zeros(0),
        };
        let nlp = PartitionedNlp::new(vec![sub.into_problem(0)], Coupling::empty(1)).unwrap();
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (_, stats) = solve_to_kkt(&nlp, &p0, 1e-9, 5).unwrap();
        assert_eq!(stats.iterations, 1);
    }

    #[test]
    fn dsqp_fixed_point_and_oracle_equivalence() {
        let nlp = toy_nonlinear_nlp();
        let op = shared_op(&nlp);
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (p_star, _) = solve_to_kkt(&nlp, &p0, 1e-11, 50).unwrap();

        // fixed point: starting at the solution stays at the solution
        let settings = DsqpSettings {
            k_max: 3,
            l_max: 40,
            ..DsqpSettings::new(1, 1)
        };
        let state = DsqpState::from_point(&op, &p_star);
        let out = dsqp_run(&nlp, &op, &state, &settings, DsqpRunConfig::default()).unwrap();
        assert!(
            out.point().distance(&p_star) <= 1e-7,
            "drift {}",
            out.point().distance(&p_star)
        );

        // oracle equivalence: generous inner budget converges to the oracle
        let settings = DsqpSettings {
            k_max: 30,
            l_max: 500,
            hessian_mode: HessianMode::Exact,
            ..DsqpSettings::new(1, 1)
        };
        let mut p_init = p_star.clone();
        p_init.z[0] += 5e-3;
        p_init.z[3] -= 4e-3;
        let state = DsqpState::from_point(&op, &p_init);
        let out = dsqp_run(&nlp, &op, &state, &settings, DsqpRunConfig::default()).unwrap();
        assert!(
            out.point().distance(&p_star) <= 1e-6,
            "distance {}",
            out.point().distance(&p_star)
        );
    }

    #[test]
    fn dsqp_contracts_q_linearly_near_solution() {
        let nlp = toy_nonlinear_nlp();
        let op = shared_op(&nlp);
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (p_star, _) = solve_to_kkt(&nlp, &p0, 1e-11, 50).unwrap();

        let settings = DsqpSettings {
            k_max: 12,
            l_max: 200,
            hessian_mode: HessianMode::Exact,
            ..DsqpSettings::new(1, 1)
        };
        let mut p_init = p_star.clone();
        p_init.z[0] += 8e-3;
        p_init.nu[0] += 5e-3;
        let state = DsqpState::from_point(&op, &p_init);
        let cfg = DsqpRunConfig {
            reference: Some(&p_star),
            ..DsqpRunConfig::default()
        };
        let out = dsqp_run(&nlp, &op, &state, &settings, cfg).unwrap();
        let mut prev = p_init.distance(&p_star);
        for (k, &d) in out.history.iter().enumerate() {
            if prev > 1e-11 && prev <= 1e-2 {
                let ratio = d / prev;
                assert!(ratio < 1.0, "iteration {k}: ratio {ratio}");
            }
            prev = d;
        }
        assert!(*out.history.last().unwrap() < 1e-9);
    }

    #[test]
    fn trace_capture_has_expected_shape() {
        let nlp = toy_nonlinear_nlp();
        let op = shared_op(&nlp);
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (p_star, _) = solve_to_kkt(&nlp, &p0, 1e-10, 50).unwrap();
        let settings = DsqpSettings {
            k_max: 3,
            l_max: 5,
            ..DsqpSettings::new(1, 1)
        };
        let mut rows = Vec::new();
        let state = DsqpState::from_point(&op, &p_star);
        let cfg = DsqpRunConfig {
            reference: Some(&p_star),
            trace: Some(&mut rows),
            ..DsqpRunConfig::default()
        };
        dsqp_run(&nlp, &op, &state, &settings, cfg).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows.iter().all(|r| r.consensus_residual <= 1e-10));
        let mut csv = Vec::new();
        write_trace_csv(&rows, &mut csv).unwrap();
        assert_eq!(csv.iter().filter(|&&b| b == b'\n').count(), 16);
    }

    #[test]
    fn auto_hessian_falls_back_on_indefiniteness() {
        let nlp = toy_nonlinear_nlp();
        // huge multiplier makes the exact Hessian indefinite on the null space
        let mut p = PrimalDualPoint::zeros(&nlp);
        p.z[0] = 1.4;
        p.nu[0] = 50.0;
        let lin_gn = build_qp(&nlp, &p, HessianMode::Auto, 1e-8);
        // subsystem 0 has no least-squares pair, so auto falls through to an error
        assert!(matches!(lin_gn, Err(DsqpError::GaussNewtonUnavailable(0))));
        // with exact mode the (indefinite) Hessian is returned as-is
        let lin = build_qp(&nlp, &p, HessianMode::Exact, 1e-8).unwrap();
        assert_eq!(lin.modes[0], HessianMode::Exact);
    }

    #[test]
    fn oracle_matches_grid_search_on_curved_constraint() {
        // minimize (z0 - 1)^2/2 + 5 (z1 - z0^2)^2/2 subject to z1 = sin(z0):
        // one-dimensional constraint manifold, solved by brute-force scan
        struct Curved;
        impl crate::nlp::SubsystemFunctions for Curved {
            fn objective(&self, z: &DVector<f64>) -> f64 {
                0.5 * (z[0] - 1.0).powi(2) + 2.5 * (z[1] - z[0] * z[0]).powi(2)
            }
            fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
                let r = z[1] - z[0] * z[0];
                DVector::from_vec(vec![(z[0] - 1.0) - 10.0 * r * z[0], 5.0 * r])
            }
            fn lagrangian_hessian(
                &self,
                z: &DVector<f64>,
                nu: &DVector<f64>,
                _mu: &DVector<f64>,
            ) -> DMatrix<f64> {
                let mut h = DMatrix::zeros(2, 2);
                h[(0, 0)] = 1.0 - 10.0 * z[1] + 30.0 * z[0] * z[0];
                h[(0, 1)] = -10.0 * z[0];
                h[(1, 0)] = -10.0 * z[0];
                h[(1, 1)] = 5.0;
                h[(0, 0)] += nu[0] * z[0].sin();
                h
            }
            fn eq(&self, z: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![z[1] - z[0].sin()])
            }
            fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_row_slice(1, 2, &[-z[0].cos(), 1.0])
            }
            fn ineq(&self, _z: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(0, 2)
            }
        }
        let surrogate = crate::nlp::GaussNewton {
            factor: DMatrix::identity(2, 2) * 6.0f64.sqrt(),
            offset: DVector::zeros(2),
            hessian: DMatrix::identity(2, 2) * 6.0,
        };
        let nlp = PartitionedNlp::new(
            vec![crate::nlp::SubsystemProblem {
                index: 0,
                dim: 2,
                eq_dim: 1,
                ineq_dim: 0,
                functions: Box::new(Curved),
                gauss_newton: Some(surrogate),
            }],
            Coupling::empty(1),
        )
        .unwrap();
        let p0 = PrimalDualPoint {
            z: DVector::from_vec(vec![0.9, 0.9f64.sin()]),
            nu: DVector::zeros(1),
            mu: DVector::zeros(0),
            lambda: DVector::zeros(0),
        };
        let (p_star, _) = match solve_to_kkt(&nlp, &p0, 1e-10, 100) {
            Ok(v) => v,
            Err(e) => panic!("oracle failed: {e}"),
        };
        assert!(kkt_residual(&nlp, &p_star) <= 1e-9);

        // grid-search reference over the constraint manifold
        let objective = |t: f64| 0.5 * (t - 1.0).powi(2) + 2.5 * (t.sin() - t * t).powi(2);
        let mut best = (f64::INFINITY, 0.0);
        let mut t = -2.0;
        while t <= 2.0 {
            let v = objective(t);
            if v < best.0 {
                best = (v, t);
            }
            t += 1e-3;
        }
        assert!(
            (p_star.z[0] - best.1).abs() <= 2e-3,
            "solver at {}, grid at {}",
            p_star.z[0],
            best.1
        );
    }

    #[test]
    fn regularity_margins_positive_near_pendulum_setpoint() {
        use crate::nlp::tests::pendulum_spec;
        let spec = pendulum_spec(3, 4, 0.04);
        let x0: Vec<DVector<f64>> = (0..3)
            .map(|_| DVector::from_vec(vec![0.02, 0.0, 0.03, 0.0]))
            .collect();
        let nlp = crate::nlp::assemble_nlp(&spec, &x0).unwrap();
        let mut p0 = PrimalDualPoint::zeros(&nlp);
        // seed states so the first linearization is bounded
        let layouts = nlp.ocp_layout.as_ref().unwrap();
        for (i, l) in layouts.iter().enumerate() {
            for stage in 0..=l.horizon {
                for c in 0..l.n_x {
                    p0.z[nlp.z_offsets[i] + l.state_offset(stage) + c] = x0[i][c];
                }
            }
        }
        let (p_star, _) = solve_to_kkt(&nlp, &p0, 1e-9, 60).unwrap();
        let report = check_regularity(&nlp, &p_star, 1e-6);
        assert!(report.strict_complementarity_margin > 0.0);
        assert!(report.licq_min_singular_value > 0.0);
        assert!(report.reduced_hessian_min_eigs.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn regularity_report_flags_rank_deficiency() {
        let nlp = toy_nonlinear_nlp();
        let p0 = PrimalDualPoint::zeros(&nlp);
        let (p_star, _) = solve_to_kkt(&nlp, &p0, 1e-10, 50).unwrap();
        let report = check_regularity(&nlp, &p_star, 1e-6);
        assert!(report.licq_min_singular_value > 1e-3);
        assert!(report.reduced_hessian_min_eigs.iter().all(|&e| e > 0.0));
        assert!(report.strict_complementarity_margin.is_infinite());
    }
}
