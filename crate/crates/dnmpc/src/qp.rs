//! Dense strictly convex QP solver.
//!
//! `minimize 0.5 x'Hx + q'x  subject to  A_eq x = b_eq,  A_in x <= b_in`
//!
//! Equalities stay inside a factored saddle-point system; inequalities are
//! handled by a dual active-set iteration that starts from the
//! equality-constrained minimizer, adds violated constraints one at a time,
//! and drops blocking ones when their multipliers would turn negative. The
//! method needs no feasibility phase, keeps dual feasibility throughout, and
//! warm starts by seeding the working set from a previous solution — which is
//! what makes it cheap inside consensus iterations that re-solve the same
//! constraint system with shifting linear terms.

use crate::kkt::{BaseKkt, DenseBaseKkt};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance below which an inequality is reported as active.
pub const ACTIVATION_TOL: f64 = 1e-6;

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("Hessian is not positive definite on the equality null space")]
    NotStrictlyConvex,
    #[error("saddle-point system is singular")]
    SingularKkt,
    #[error("active-set iteration limit reached")]
    MaxIterations,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Clone, Debug)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl DenseQp {
    pub fn unconstrained(h: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = h.nrows();
        Self {
            h,
            q,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
        }
    }

    fn check_dims(&self) -> Result<(), QpError> {
        let n = self.h.nrows();
        let bad = self.h.ncols() != n
            || self.q.len() != n
            || (self.a_eq.nrows() > 0 && self.a_eq.ncols() != n)
            || (self.a_in.nrows() > 0 && self.a_in.ncols() != n)
            || self.b_eq.len() != self.a_eq.nrows()
            || self.b_in.len() != self.a_in.nrows();
        if bad {
            return Err(QpError::DimensionMismatch(
                "matrix and vector sizes are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub y: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Constraints within `ACTIVATION_TOL` of their bound.
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// One-shot solve of a dense QP.
pub fn solve(
    qp: &DenseQp,
    warm_start: Option<&QpSolution>,
    tol: f64,
) -> Result<QpSolution, QpError> {
    qp.check_dims()?;
    #[cfg(debug_assertions)]
    if qp.h.nrows() <= 64 {
        let sym = (&qp.h + qp.h.transpose()) * 0.5;
        if !crate::linalg::posdef_on_null_space(&sym, &qp.a_eq) {
            return Err(QpError::NotStrictlyConvex);
        }
    }
    let base = DenseBaseKkt::factor(&qp.h, &qp.a_eq).ok_or_else(|| classify_singular(qp))?;
    let warm: Option<&[usize]> = warm_start.map(|w| w.active_set.as_slice());
    solve_with_base(&base, &qp.q, &qp.b_eq, &qp.a_in, &qp.b_in, warm, tol)
}

fn classify_singular(qp: &DenseQp) -> QpError {
    if qp.a_eq.nrows() == 0 {
        return QpError::NotStrictlyConvex;
    }
    // an inconsistent equality system reads as infeasibility; otherwise the
    // reduced Hessian is at fault
    let svd = qp.a_eq.clone().svd(true, true);
    match svd.solve(&qp.b_eq, 1e-12) {
        Ok(x) => {
            let residual = (&qp.a_eq * &x - &qp.b_eq).abs().max();
            if residual > 1e-8 * (1.0 + qp.b_eq.abs().max()) {
                QpError::Infeasible
            } else {
                QpError::NotStrictlyConvex
            }
        }
        Err(_) => QpError::SingularKkt,
    }
}

/// Exact solve of the equality-constrained saddle system
/// `[[H, A'],[A, 0]] (y, nu) = (-q, b)`.
pub fn solve_equality_kkt(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let base = DenseBaseKkt::factor(h, a_eq).ok_or(QpError::SingularKkt)?;
    base.solve(&(-q), b_eq).ok_or(QpError::SingularKkt)
}

/// Solver view over a factored equality system plus a fixed inequality block,
/// for repeated solves with varying linear terms.
pub struct QpEngine<'a> {
    base: &'a dyn BaseKkt,
    a_in: &'a DMatrix<f64>,
    b_in: &'a DVector<f64>,
}

impl<'a> QpEngine<'a> {
    pub fn new(base: &'a dyn BaseKkt, a_in: &'a DMatrix<f64>, b_in: &'a DVector<f64>) -> Self {
        Self { base, a_in, b_in }
    }

    pub fn solve(
        &self,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        warm: Option<&[usize]>,
        tol: f64,
    ) -> Result<QpSolution, QpError> {
        solve_with_base(self.base, q, b_eq, self.a_in, self.b_in, warm, tol)
    }
}

struct WorkingSet<'a> {
    base: &'a dyn BaseKkt,
    a_in: &'a DMatrix<f64>,
    b_in: &'a DVector<f64>,
    /// Active constraint indices, in insertion order.
    idx: Vec<usize>,
    /// Saddle solutions `K0^{-1} [a_j; 0]` per active constraint.
    cols: Vec<(DVector<f64>, DVector<f64>)>,
    /// Gram matrix `a_j . xpart(col_k)`.
    s: DMatrix<f64>,
}

impl<'a> WorkingSet<'a> {
    fn new(base: &'a dyn BaseKkt, a_in: &'a DMatrix<f64>, b_in: &'a DVector<f64>) -> Self {
        Self {
            base,
            a_in,
            b_in,
            idx: Vec::new(),
            cols: Vec::new(),
            s: DMatrix::zeros(0, 0),
        }
    }

    fn contains(&self, j: usize) -> bool {
        self.idx.contains(&j)
    }

    fn push(&mut self, j: usize) -> Result<(), QpError> {
        let a_j = self.a_in.row(j).transpose();
        let col = self
            .base
            .solve(&a_j, &DVector::zeros(self.base.m()))
            .ok_or(QpError::SingularKkt)?;
        let k = self.idx.len();
        let mut s = DMatrix::zeros(k + 1, k + 1);
        s.view_mut((0, 0), (k, k)).copy_from(&self.s);
        for (r, &jr) in self.idx.iter().enumerate() {
            s[(r, k)] = self.a_in.row(jr).transpose().dot(&col.0);
            s[(k, r)] = a_j.dot(&self.cols[r].0);
        }
        s[(k, k)] = a_j.dot(&col.0);
        self.idx.push(j);
        self.cols.push(col);
        self.s = s;
        Ok(())
    }

    fn remove(&mut self, pos: usize) {
        self.idx.remove(pos);
        self.cols.remove(pos);
        self.s = self.s.clone().remove_row(pos).remove_column(pos);
    }

    /// Joint minimizer with the working set held as equalities, plus its
    /// multipliers. `None` when the working set is linearly dependent.
    fn solve_seeded(
        &self,
        v0: &(DVector<f64>, DVector<f64>),
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if self.idx.is_empty() {
            return Some((v0.0.clone(), v0.1.clone(), DVector::zeros(0)));
        }
        let k = self.idx.len();
        let mut rhs = DVector::zeros(k);
        for (r, &jr) in self.idx.iter().enumerate() {
            rhs[r] = self.a_in.row(jr).transpose().dot(&v0.0) - self.b_in[jr];
        }
        let lu = self.s.clone().lu();
        let mu = lu.solve(&rhs)?;
        let mut x = v0.0.clone();
        let mut nu = v0.1.clone();
        for (c, colv) in self.cols.iter().enumerate() {
            x -= &colv.0 * mu[c];
            nu -= &colv.1 * mu[c];
        }
        Some((x, nu, mu))
    }

    /// Direction of `(x, nu, mu_W)` per unit of a new multiplier on `a_new`,
    /// given the base solution `t = K0^{-1}[a_new; 0]`.
    fn direction(
        &self,
        t: &(DVector<f64>, DVector<f64>),
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
        if self.idx.is_empty() {
            return Ok((t.0.clone(), t.1.clone(), DVector::zeros(0)));
        }
        let k = self.idx.len();
        let mut rhs = DVector::zeros(k);
        for (r, &jr) in self.idx.iter().enumerate() {
            rhs[r] = self.a_in.row(jr).transpose().dot(&t.0);
        }
        let r = self
            .s
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(QpError::SingularKkt)?;
        let mut zx = t.0.clone();
        let mut znu = t.1.clone();
        for (c, colv) in self.cols.iter().enumerate() {
            zx -= &colv.0 * r[c];
            znu -= &colv.1 * r[c];
        }
        Ok((zx, znu, r))
    }
}

pub fn solve_with_base(
    base: &dyn BaseKkt,
    q: &DVector<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    warm: Option<&[usize]>,
    tol: f64,
) -> Result<QpSolution, QpError> {
    let n = base.n();
    if q.len() != n || b_eq.len() != base.m() || a_in.nrows() != b_in.len() {
        return Err(QpError::DimensionMismatch(
            "right-hand sides inconsistent with the factored system".into(),
        ));
    }
    let m_in = a_in.nrows();
    let max_iter = 100 + 20 * m_in;
    let mut iterations = 0usize;

    let v0 = base.solve(&(-q), b_eq).ok_or(QpError::SingularKkt)?;
    let mut ws = WorkingSet::new(base, a_in, b_in);
    let mut x = v0.0.clone();
    let mut nu = v0.1.clone();
    let mut u: Vec<f64> = Vec::new();

    // seed the working set from a previous active set, pruning until the
    // seeded multipliers are dual feasible
    if let Some(seed) = warm {
        let mut seeded = true;
        for &j in seed {
            if j >= m_in || ws.contains(j) {
                continue;
            }
            if ws.push(j).is_err() {
                seeded = false;
                break;
            }
        }
        if seeded {
            loop {
                iterations += 1;
                match ws.solve_seeded(&v0) {
                    Some((xs, nus, mus)) => {
                        x = xs;
                        nu = nus;
                        u = mus.iter().cloned().collect();
                        let neg = u
                            .iter()
                            .enumerate()
                            .filter(|(_, &v)| v < -1e-12)
                            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(pos, _)| pos);
                        match neg {
                            Some(pos) => {
                                ws.remove(pos);
                            }
                            None => break,
                        }
                    }
                    None => {
                        seeded = false;
                        break;
                    }
                }
            }
        }
        if !seeded {
            ws = WorkingSet::new(base, a_in, b_in);
            x = v0.0.clone();
            nu = v0.1.clone();
            u = Vec::new();
        }
    }

    loop {
        if iterations > max_iter {
            return Err(QpError::MaxIterations);
        }
        // most violated inequality, lowest index on ties
        let mut p = None;
        let mut worst = tol;
        for j in 0..m_in {
            if ws.contains(j) {
                continue;
            }
            let s_j = a_in.row(j).transpose().dot(&x) - b_in[j];
            if s_j > worst {
                worst = s_j;
                p = Some(j);
            }
        }
        let Some(p) = p else { break };

        let a_p = a_in.row(p).transpose();
        let t = base
            .solve(&a_p, &DVector::zeros(base.m()))
            .ok_or(QpError::SingularKkt)?;
        let mut u_p = 0.0_f64;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations);
            }
            let (zx, znu, r) = ws.direction(&t)?;
            let curvature = a_p.dot(&zx);
            let slack = a_p.dot(&x) - b_in[p];

            // blocking step from the active multipliers
            let mut t1 = f64::INFINITY;
            let mut blocker = None;
            for (pos, &rv) in r.iter().enumerate() {
                if rv > 1e-12 {
                    let step = u[pos] / rv;
                    if step < t1 - 1e-15 {
                        t1 = step;
                        blocker = Some(pos);
                    }
                }
            }
            let t2 = if curvature > 1e-12 {
                slack / curvature
            } else {
                f64::INFINITY
            };
            let step = t1.min(t2);
            if !step.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                x -= &zx * step;
                nu -= &znu * step;
            }
            for (pos, &rv) in r.iter().enumerate() {
                u[pos] -= step * rv;
            }
            u_p += step;
            if step == t2 && t2 <= t1 {
                ws.push(p)?;
                u.push(u_p);
                break;
            }
            let pos = blocker.expect("finite partial step implies a blocker");
            ws.remove(pos);
            u.remove(pos);
        }
    }

    let mut mu = DVector::zeros(m_in);
    for (pos, &j) in ws.idx.iter().enumerate() {
        mu[j] = u[pos];
    }
    let mut active_set = Vec::new();
    for j in 0..m_in {
        if a_in.row(j).transpose().dot(&x) - b_in[j] >= -ACTIVATION_TOL {
            active_set.push(j);
        }
    }
    let kkt_residual = solution_residual(base, q, b_eq, a_in, b_in, &x, &nu, &mu);
    Ok(QpSolution {
        y: x,
        eq_multipliers: nu,
        ineq_multipliers: mu,
        active_set,
        kkt_residual,
        iterations: iterations.max(1),
    })
}

/// Max-norm KKT residual: stationarity, primal feasibility, complementarity,
/// and multiplier sign.
pub fn solution_residual(
    base: &dyn BaseKkt,
    q: &DVector<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    x: &DVector<f64>,
    nu: &DVector<f64>,
    mu: &DVector<f64>,
) -> f64 {
    let (mut stat, ax) = base.multiply(x, nu);
    stat += q;
    if a_in.nrows() > 0 {
        stat += a_in.transpose() * mu;
    }
    let mut worst = stat.abs().max();
    if base.m() > 0 {
        worst = worst.max((ax - b_eq).abs().max());
    }
    for j in 0..a_in.nrows() {
        let slack = a_in.row(j).transpose().dot(x) - b_in[j];
        worst = worst.max(slack.max(0.0));
        worst = worst.max((mu[j] * slack).abs());
        worst = worst.max((-mu[j]).max(0.0));
    }
    worst
}
