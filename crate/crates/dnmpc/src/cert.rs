//! Certificate calculators: contraction factors and Lipschitz constants of
//! the inner consensus iteration, the sufficient inner-iteration budget, and
//! the sampling-interval constants that certify closed-loop stability.

use crate::admm::AveragingOperator;
use crate::dsqp::{build_qp, DsqpError, HessianMode, QpLinearization};
use crate::kkt::{BaseKkt, DenseBaseKkt};
use crate::linalg::{random_in_unit_ball, seeded_rng, spectral_norm_op, LinearOp};
use crate::nlp::{PartitionedNlp, PrimalDualPoint};
use crate::qp::ACTIVATION_TOL;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CertError {
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),
    #[error("saddle system singular at sample {0}")]
    SingularKkt(usize),
    #[error(transparent)]
    Dsqp(#[from] DsqpError),
    #[error("certificate inconclusive: {0}")]
    Inconclusive(String),
}

/// Linearized subsystem QPs with the active inequality rows pinned, plus the
/// averaging operator: everything the contraction analysis needs at one
/// linearization point.
pub struct LtiOperator {
    factored: Vec<DenseBaseKkt>,
    z_offsets: Vec<usize>,
    dims: Vec<usize>,
    eq_dims: Vec<usize>,
    act_dims: Vec<usize>,
    pub op: Arc<AveragingOperator>,
    pub rho: f64,
    pub n: usize,
}

impl LtiOperator {
    /// Builds the operator from exact-Hessian linearization data and the
    /// active-set selection (row indices per subsystem).
    pub fn new(
        lin: &QpLinearization,
        active: &[Vec<usize>],
        op: Arc<AveragingOperator>,
        rho: f64,
    ) -> Result<Self, CertError> {
        let s = lin.h_blocks.len();
        let mut factored = Vec::with_capacity(s);
        let mut z_offsets = Vec::with_capacity(s);
        let mut dims = Vec::with_capacity(s);
        let mut eq_dims = Vec::with_capacity(s);
        let mut act_dims = Vec::with_capacity(s);
        let mut n = 0usize;
        for i in 0..s {
            let n_i = lin.h_blocks[i].nrows();
            let m_g = lin.g_jacs[i].nrows();
            let m_a = active[i].len();
            let mut a_combined = DMatrix::zeros(m_g + m_a, n_i);
            a_combined
                .view_mut((0, 0), (m_g, n_i))
                .copy_from(&lin.g_jacs[i]);
            for (k, &row) in active[i].iter().enumerate() {
                for c in 0..n_i {
                    a_combined[(m_g + k, c)] = lin.h_jacs[i][(row, c)];
                }
            }
            let h_aug = &lin.h_blocks[i] + DMatrix::identity(n_i, n_i) * rho;
            let base =
                DenseBaseKkt::factor(&h_aug, &a_combined).ok_or(CertError::SingularKkt(i))?;
            factored.push(base);
            z_offsets.push(n);
            dims.push(n_i);
            eq_dims.push(m_g);
            act_dims.push(m_a);
            n += n_i;
        }
        Ok(Self {
            factored,
            z_offsets,
            dims,
            eq_dims,
            act_dims,
            op,
            rho,
            n,
        })
    }

    /// `T v = rho * (top block of K^{-1} [v; 0])`, blockwise over subsystems.
    pub fn apply_t(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.factored.len() {
            let v_i = v.rows(self.z_offsets[i], self.dims[i]).into_owned();
            let (x, _) = self.factored[i]
                .solve(&v_i, &DVector::zeros(self.eq_dims[i] + self.act_dims[i]))
                .expect("factorization verified at construction");
            out.rows_mut(self.z_offsets[i], self.dims[i])
                .copy_from(&(x * self.rho));
        }
        out
    }

    /// Local-solve error map `D`: sends `(dz, dgamma/rho)` to the error in
    /// `(y, nu, mu_active)`, stacked per subsystem.
    pub fn apply_d(&self, w: &DVector<f64>) -> DVector<f64> {
        let diff = w.rows(0, self.n) - w.rows(self.n, self.n);
        let mut out = DVector::zeros(self.d_rows());
        let mut row = 0;
        for i in 0..self.factored.len() {
            let v_i = diff.rows(self.z_offsets[i], self.dims[i]).into_owned();
            let (x, m) = self.factored[i]
                .solve(&v_i, &DVector::zeros(self.eq_dims[i] + self.act_dims[i]))
                .expect("factorization verified at construction");
            let block = self.dims[i] + self.eq_dims[i] + self.act_dims[i];
            out.rows_mut(row, self.dims[i]).copy_from(&(&x * self.rho));
            out.rows_mut(row + self.dims[i], self.eq_dims[i] + self.act_dims[i])
                .copy_from(&(&m * self.rho));
            row += block;
        }
        out
    }

    pub fn apply_d_transpose(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut top = DVector::zeros(self.n);
        let mut row = 0;
        for i in 0..self.factored.len() {
            let r1 = r.rows(row, self.dims[i]).into_owned();
            let r2 = r
                .rows(row + self.dims[i], self.eq_dims[i] + self.act_dims[i])
                .into_owned();
            // K symmetric: D' r = rho [I; -I] top-block of K^{-1} r
            let (x, _) = self.factored[i].solve(&r1, &r2).expect("factor verified");
            top.rows_mut(self.z_offsets[i], self.dims[i])
                .copy_from(&(x * self.rho));
            row += self.dims[i] + self.eq_dims[i] + self.act_dims[i];
        }
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&top);
        out.rows_mut(self.n, self.n).copy_from(&(-top));
        out
    }

    pub fn d_rows(&self) -> usize {
        (0..self.factored.len())
            .map(|i| self.dims[i] + self.eq_dims[i] + self.act_dims[i])
            .sum()
    }

    /// One-step error map of the consensus iteration on `w = (z, gamma/rho)`.
    pub fn apply_lti(&self, w: &DVector<f64>) -> DVector<f64> {
        let w1 = w.rows(0, self.n).into_owned();
        let w2 = w.rows(self.n, self.n).into_owned();
        let s = &w2 + self.apply_t(&(w1 - &w2));
        let ms = self.op.project_linear(&s);
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&ms);
        out.rows_mut(self.n, self.n).copy_from(&(s - ms));
        out
    }

    pub fn apply_lti_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let v1 = v.rows(0, self.n).into_owned();
        let v2 = v.rows(self.n, self.n).into_owned();
        // [M; I-M]' (v1, v2) = M v1 + (I - M) v2, with M symmetric
        let m = &v2 + self.op.project_linear(&(v1 - &v2));
        let t = self.apply_t(&m); // T symmetric
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&t);
        out.rows_mut(self.n, self.n).copy_from(&(m - t));
        out
    }

    /// Projection onto the error subspace the iteration actually evolves in:
    /// consensus-feasible primal errors and duals in the coupling row space.
    pub fn project_invariant(&self, w: &DVector<f64>) -> DVector<f64> {
        let w1 = w.rows(0, self.n).into_owned();
        let w2 = w.rows(self.n, self.n).into_owned();
        let p1 = self.op.project_linear(&w1);
        let p2 = &w2 - self.op.project_linear(&w2);
        let mut out = DVector::zeros(2 * self.n);
        out.rows_mut(0, self.n).copy_from(&p1);
        out.rows_mut(self.n, self.n).copy_from(&p2);
        out
    }

    /// Contraction factor: norm of the one-step map restricted to the
    /// invariant error subspace.
    pub fn contraction_norm(&self, seed: u64) -> f64 {
        struct Restricted<'a>(&'a LtiOperator);
        impl LinearOp for Restricted<'_> {
            fn rows(&self) -> usize {
                2 * self.0.n
            }
            fn cols(&self) -> usize {
                2 * self.0.n
            }
            fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.apply_lti(&self.0.project_invariant(x))
            }
            fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
                self.0.project_invariant(&self.0.apply_lti_transpose(y))
            }
        }
        spectral_norm_op(&Restricted(self), 600, 1e-11, seed)
    }

    /// Unrestricted norm of the one-step map (diagnostic; equals one whenever
    /// constrained directions exist).
    pub fn full_norm(&self, seed: u64) -> f64 {
        struct Full<'a>(&'a LtiOperator);
        impl LinearOp for Full<'_> {
            fn rows(&self) -> usize {
                2 * self.0.n
            }
            fn cols(&self) -> usize {
                2 * self.0.n
            }
            fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.apply_lti(x)
            }
            fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
                self.0.apply_lti_transpose(y)
            }
        }
        spectral_norm_op(&Full(self), 600, 1e-11, seed)
    }

    /// Norm of the local-solve error map.
    pub fn d_norm(&self, seed: u64) -> f64 {
        struct DOp<'a>(&'a LtiOperator);
        impl LinearOp for DOp<'_> {
            fn rows(&self) -> usize {
                self.0.d_rows()
            }
            fn cols(&self) -> usize {
                2 * self.0.n
            }
            fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
                self.0.apply_d(x)
            }
            fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
                self.0.apply_d_transpose(y)
            }
        }
        spectral_norm_op(&DOp(self), 600, 1e-11, seed)
    }

    /// Dominant eigenvalue magnitude of the one-step map (power iteration).
    pub fn spectral_radius_estimate(&self, iters: usize, seed: u64) -> f64 {
        let mut rng = seeded_rng(seed);
        let mut v = DVector::from_fn(2 * self.n, |_, _| crate::linalg::standard_normal(&mut rng));
        v /= v.norm();
        let mut lam = 0.0;
        for _ in 0..iters {
            let w = self.apply_lti(&v);
            let nw = w.norm();
            if nw < 1e-300 {
                return 0.0;
            }
            lam = nw;
            v = w / nw;
        }
        lam
    }

    /// Dense one-step matrix; intended for small problems and oracle tests.
    pub fn dense_lti(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(2 * self.n, 2 * self.n);
        for j in 0..2 * self.n {
            let mut e = DVector::zeros(2 * self.n);
            e[j] = 1.0;
            a.set_column(j, &self.apply_lti(&e));
        }
        a
    }

    pub fn dense_d(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.d_rows(), 2 * self.n);
        for j in 0..2 * self.n {
            let mut e = DVector::zeros(2 * self.n);
            e[j] = 1.0;
            d.set_column(j, &self.apply_d(&e));
        }
        d
    }
}

/// Norm of the averaging-step error map `[M; (EE')^{-1}E rho][I I]` scaled by
/// `1/rho` on the second block, evaluated matrix-free.
pub fn averaging_error_norm(op: &AveragingOperator, rho: f64, seed: u64) -> f64 {
    struct D1<'a> {
        op: &'a AveragingOperator,
        rho: f64,
    }
    impl LinearOp for D1<'_> {
        fn rows(&self) -> usize {
            self.op.n + self.op.n_c
        }
        fn cols(&self) -> usize {
            2 * self.op.n
        }
        fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
            let sum = x.rows(0, self.op.n) + x.rows(self.op.n, self.op.n);
            let top = self.op.project_linear(&sum);
            let bottom = self.op.recover_lambda(&sum, self.rho);
            let mut out = DVector::zeros(self.op.n + self.op.n_c);
            out.rows_mut(0, self.op.n).copy_from(&top);
            out.rows_mut(self.op.n, self.op.n_c).copy_from(&bottom);
            out
        }
        fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
            let u = y.rows(0, self.op.n).into_owned();
            let w = y.rows(self.op.n, self.op.n_c).into_owned();
            // M'u + rho E'(EE')^{-1} w, duplicated over both input blocks
            let t = self.op.project_linear(&u)
                + self.op.apply_e_t(&(self.op.gram_solve(&w) * self.rho));
            let mut out = DVector::zeros(2 * self.op.n);
            out.rows_mut(0, self.op.n).copy_from(&t);
            out.rows_mut(self.op.n, self.op.n).copy_from(&t);
            out
        }
    }
    spectral_norm_op(&D1 { op, rho }, 600, 1e-11, seed)
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub d1: f64,
    pub d2: f64,
    pub c1: f64,
    pub c2: f64,
    /// Contraction factor on the invariant error subspace.
    pub a_w: f64,
    /// Unrestricted one-step norm (diagnostic).
    pub a_w_full: f64,
    /// Dominant-eigenvalue estimate (diagnostic).
    pub spectral_radius: f64,
    pub target_accuracy: Option<f64>,
    pub l_max_bound: Option<usize>,
    pub sample_radius: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub conclusive: bool,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleConfig {
    pub count: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 64,
            radius: 1e-2,
            seed: 7,
        }
    }
}

/// Active inequality rows per subsystem at a reference solution.
pub fn active_sets_at(nlp: &PartitionedNlp, p: &PrimalDualPoint) -> Vec<Vec<usize>> {
    (0..nlp.subsystem_count())
        .map(|i| {
            let z_i = nlp.z_slice(&p.z, i);
            let h = nlp.subsystems[i].functions.ineq(&z_i);
            (0..h.len()).filter(|&j| h[j] >= -ACTIVATION_TOL).collect()
        })
        .collect()
}

/// Draws primal-dual samples around `p_star`, builds the exact-Hessian
/// linearization at each, and maximizes the certificate quantities over the
/// sample set. The first sample is the reference point itself.
pub fn certify_qp(
    nlp: &PartitionedNlp,
    op: &Arc<AveragingOperator>,
    p_star: &PrimalDualPoint,
    rho: f64,
    cfg: &SampleConfig,
    target_accuracy: Option<f64>,
) -> Result<Certificate, CertError> {
    if cfg.count == 0 {
        return Err(CertError::InvalidInputs(
            "sample count must be positive".into(),
        ));
    }
    let active = active_sets_at(nlp, p_star);
    let mut rng = seeded_rng(cfg.seed);
    let dim = nlp.n + nlp.n_g + nlp.n_h + nlp.n_c();

    let mut d2 = 0.0f64;
    let mut a_w = 0.0f64;
    let mut a_w_full = 0.0f64;
    let mut radius = 0.0f64;

    for sample in 0..cfg.count {
        let p = if sample == 0 {
            p_star.clone()
        } else {
            let ball = random_in_unit_ball(&mut rng, dim);
            let mut p = p_star.clone();
            let mut k = 0;
            for v in p.z.iter_mut() {
                *v += cfg.radius * ball[k] * (1.0 + v.abs());
                k += 1;
            }
            for v in p.nu.iter_mut() {
                *v += cfg.radius * ball[k] * (1.0 + v.abs());
                k += 1;
            }
            for v in p.mu.iter_mut() {
                *v += cfg.radius * ball[k] * (1.0 + v.abs());
                k += 1;
            }
            for v in p.lambda.iter_mut() {
                *v += cfg.radius * ball[k] * (1.0 + v.abs());
                k += 1;
            }
            p
        };
        let lin = build_qp(nlp, &p, HessianMode::Exact, 0.0)?;
        let lti = LtiOperator::new(&lin, &active, op.clone(), rho)?;
        let seed = cfg
            .seed
            .wrapping_add(sample as u64)
            .wrapping_mul(0x9e3779b9);
        d2 = d2.max(lti.d_norm(seed));
        a_w = a_w.max(lti.contraction_norm(seed));
        if sample == 0 {
            a_w_full = lti.full_norm(seed);
        }
        radius = radius.max(p.distance(p_star));
    }

    let lti_ref = {
        let lin = build_qp(nlp, p_star, HessianMode::Exact, 0.0)?;
        LtiOperator::new(&lin, &active, op.clone(), rho)?
    };
    let spectral_radius = lti_ref.spectral_radius_estimate(200, cfg.seed ^ 0x5bd1e995);
    let d1 = averaging_error_norm(op, rho, cfg.seed ^ 0xabcdef);
    let c1 = (op.coupling_norm() / rho).max(1.0);
    let c2 = d1 + d1 * d2 + d2;

    let conclusive = a_w < 1.0 && d2.is_finite() && c2.is_finite();
    let l_max_bound = match (conclusive, target_accuracy) {
        (true, Some(a)) => Some(lmax_bound(a, a_w, c1, c2)?),
        _ => None,
    };
    Ok(Certificate {
        d1,
        d2,
        c1,
        c2,
        a_w,
        a_w_full,
        spectral_radius,
        target_accuracy,
        l_max_bound,
        sample_radius: cfg.radius,
        sample_count: cfg.count,
        seed: cfg.seed,
        conclusive,
        note: (!conclusive).then(|| format!("one-step contraction {a_w} not below one")),
    })
}

/// Sufficient number of inner iterations for a relative subproblem accuracy
/// `a`: `1 + max(0, ceil(log_{a_w}(a / (c1 c2))))`.
pub fn lmax_bound(a: f64, a_w: f64, c1: f64, c2: f64) -> Result<usize, CertError> {
    if !(0.0 < a && a < 1.0) {
        return Err(CertError::InvalidInputs(format!(
            "accuracy {a} outside (0,1)"
        )));
    }
    if !(0.0 < a_w && a_w < 1.0) {
        return Err(CertError::InvalidInputs(format!(
            "contraction factor {a_w} outside (0,1): certificate inconclusive"
        )));
    }
    if c1 < 1.0 || c2 <= 0.0 {
        return Err(CertError::InvalidInputs(format!(
            "constants c1={c1}, c2={c2} invalid"
        )));
    }
    let x = (a / (c1 * c2)).ln() / a_w.ln();
    // absolute guard keeps mathematically integral logs from ceiling up
    let ceiled = (x - 1e-9).ceil() as i64;
    Ok(1 + ceiled.max(0) as usize)
}

// ---------------------------------------------------------------------------
// Closed-loop stability constants
// ---------------------------------------------------------------------------

/// Constants fitted from simulations of the exact-feedback loop.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RtiInputs {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub l_fx_c: f64,
    pub l_fu_c: f64,
    pub l_px: f64,
    pub l_vx: f64,
}

/// Free design quantities of the stability chain.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RtiParams {
    /// Candidate sampling interval.
    pub delta: f64,
    /// Horizon constant for the discrete-time Lipschitz bounds; defaults to
    /// the sampling interval.
    pub delta1: Option<f64>,
    /// Level of the value-function sublevel set the analysis is run on.
    pub v_bar: f64,
    /// Optimizer initialization radius.
    pub r_p: f64,
    /// State-change radius.
    pub r_x: f64,
    /// Outer optimizer contraction factor.
    pub a_p: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RtiConstants {
    pub inputs: RtiInputs,
    pub delta1: f64,
    pub l_fx_d1: f64,
    pub l_fu_d1: f64,
    pub eta: f64,
    pub r_vbar: f64,
    pub delta3: f64,
    pub kappa: f64,
    pub l_v: f64,
    pub a_bar: f64,
    pub l_e: f64,
    pub l_vp: f64,
    pub beta_prime: f64,
    pub r_p_tilde: f64,
    pub delta4_prime: f64,
    pub delta5: f64,
    pub delta_bar: f64,
    pub conclusive: bool,
}

/// Deterministic tail of the stability analysis: from fitted Lipschitz and
/// envelope constants to the sufficient sampling interval and optimizer
/// initialization radius.
pub fn rti_constant_chain(
    inputs: &RtiInputs,
    params: &RtiParams,
) -> Result<RtiConstants, CertError> {
    let pos = [
        inputs.a1,
        inputs.a2,
        inputs.a3,
        inputs.l_fx_c,
        inputs.l_fu_c,
        inputs.l_px,
        inputs.l_vx,
        params.delta,
        params.v_bar,
        params.r_p,
        params.r_x,
        params.a_p,
    ];
    if pos.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(CertError::InvalidInputs(
            "all fitted constants and radii must be positive".into(),
        ));
    }
    if params.a_p >= 1.0 {
        return Err(CertError::Inconclusive(format!(
            "outer contraction {} not below one",
            params.a_p
        )));
    }
    let delta1 = params.delta1.unwrap_or(params.delta);
    let growth = (inputs.l_fx_c * delta1).exp();
    let l_fx_d1 = growth * inputs.l_fx_c;
    let l_fu_d1 = growth * inputs.l_fu_c;
    let eta = l_fx_d1 + l_fu_d1 * inputs.l_px;
    let r_vbar = (params.v_bar / inputs.a1).sqrt();
    let delta3 = params
        .delta
        .min(delta1)
        .min(params.r_x / (eta * r_vbar + l_fu_d1 * params.r_p))
        .min(
            params.r_p * (1.0 - params.a_p)
                / (inputs.l_px * params.a_p * (l_fu_d1 * params.r_p + eta * r_vbar)),
        );
    let kappa = params.a_p * (1.0 + delta3 * inputs.l_px * l_fu_d1);
    if kappa >= 1.0 {
        return Err(CertError::Inconclusive(format!(
            "kappa = {kappa} not below one"
        )));
    }
    let l_v = 2.0 * params.v_bar.sqrt() * inputs.l_vx;
    let a_bar = inputs.a3 / inputs.a2;
    let l_e = l_v * l_fu_d1;
    let l_vp = inputs.l_fu_c * growth * inputs.l_vx;
    let beta_prime = a_bar * inputs.a1.sqrt() / (4.0 * inputs.l_px * params.a_p * eta);
    let r_p_tilde = params.r_p.min(a_bar * params.v_bar / l_e);
    let delta4_prime = (1.0 - kappa) * r_p_tilde * inputs.a1.sqrt()
        / (params.v_bar.sqrt() * inputs.l_px * params.a_p * eta);
    let delta5 = beta_prime * (1.0 - kappa) / l_vp;
    let delta_bar = delta3.min(delta4_prime).min(delta5);
    let conclusive = delta_bar.is_finite() && delta_bar > 0.0 && r_p_tilde > 0.0;
    Ok(RtiConstants {
        inputs: *inputs,
        delta1,
        l_fx_d1,
        l_fu_d1,
        eta,
        r_vbar,
        delta3,
        kappa,
        l_v,
        a_bar,
        l_e,
        l_vp,
        beta_prime,
        r_p_tilde,
        delta4_prime,
        delta5,
        delta_bar,
        conclusive,
    })
}

/// Problem hooks for fitting the stability-chain inputs from simulations of
/// the exact-feedback loop near the setpoint.
pub struct RtiFitProblem<'a> {
    pub state_dim: usize,
    /// Optimal value, first input, and flattened primal-dual solution at `x`.
    pub solve: &'a dyn Fn(&DVector<f64>) -> (f64, DVector<f64>, DVector<f64>),
    pub plant_step: &'a dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    pub continuous_rhs: &'a dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FitBudget {
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for FitBudget {
    fn default() -> Self {
        Self {
            samples: 64,
            radius: 0.05,
            seed: 11,
        }
    }
}

/// Estimates envelope and Lipschitz constants by sampled difference
/// quotients close to the setpoint.
pub fn fit_rti_inputs(
    prob: &RtiFitProblem<'_>,
    budget: &FitBudget,
) -> Result<RtiInputs, CertError> {
    if budget.samples < 2 {
        return Err(CertError::InvalidInputs("need at least two samples".into()));
    }
    let mut rng = seeded_rng(budget.seed);
    let mut a1 = f64::INFINITY;
    let mut a2 = 0.0f64;
    let mut a3 = f64::INFINITY;
    let mut l_fx: f64 = 0.0;
    let mut l_fu: f64 = 0.0;
    let mut l_px: f64 = 0.0;
    let mut l_vx: f64 = 0.0;

    let mut prev: Option<(DVector<f64>, f64, DVector<f64>, DVector<f64>)> = None;
    for _ in 0..budget.samples {
        let x = random_in_unit_ball(&mut rng, prob.state_dim) * budget.radius;
        if x.norm() < 1e-9 {
            continue;
        }
        let (v, u, p) = (prob.solve)(&x);
        let ratio = v / x.norm_squared();
        a1 = a1.min(ratio);
        a2 = a2.max(ratio);
        let x_next = (prob.plant_step)(&x, &u);
        let (v_next, _, _) = (prob.solve)(&x_next);
        a3 = a3.min((v - v_next) / (prob.delta * x.norm_squared()));

        if let Some((xp, vp, up, pp)) = &prev {
            let dx = (&x - xp).norm();
            if dx > 1e-10 {
                let df = ((prob.continuous_rhs)(&x, &u) - (prob.continuous_rhs)(xp, &u)).norm();
                l_fx = l_fx.max(df / dx);
                l_px = l_px.max((&p - pp).norm() / dx);
                l_vx = l_vx.max((v.sqrt() - vp.sqrt()).abs() / dx);
            }
            let du = (&u - up).norm();
            if du > 1e-10 {
                let df = ((prob.continuous_rhs)(&x, &u) - (prob.continuous_rhs)(&x, up)).norm();
                l_fu = l_fu.max(df / du);
            }
            let _ = vp;
        }
        prev = Some((x, v, u, p));
    }
    if !a1.is_finite() || a2 <= 0.0 {
        return Err(CertError::Inconclusive(
            "value-function envelope fit failed".into(),
        ));
    }
    if a3 <= 0.0 {
        return Err(CertError::Inconclusive(format!(
            "no per-step value decrease observed (a3 = {a3})"
        )));
    }
    Ok(RtiInputs {
        a1,
        a2,
        a3,
        l_fx_c: l_fx,
        l_fu_c: l_fu,
        l_px,
        l_vx,
    })
}
