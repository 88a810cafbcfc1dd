//! Consensus ADMM on partially separable QPs in two-block form.
//!
//! Each iteration solves the augmented local QPs in parallel across
//! subsystems, projects onto the consensus set (an averaging step), and takes
//! a dual ascent step. The averaging step is available both as a centralized
//! closed form and as a two-round neighbor-to-neighbor message exchange that
//! reproduces it exactly.

use crate::bus::{BusError, RoundBus};
use crate::kkt::{BlockBaseKkt, DenseBaseKkt};
use crate::nlp::Coupling;
use crate::qp::{QpEngine, QpError, QpSolution};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),
    #[error("coupling is not star-shaped; decentralized averaging unsupported")]
    NotStarShaped,
    #[error("coupling Gram matrix is singular")]
    SingularCouplingGram,
}

/// Consensus projection machinery: the averaging matrix
/// `M = I - E'(EE')^{-1}E` in factored form, the exact group-mean realization
/// of it for homogeneous pairings, and the multiplier recovery map.
pub struct AveragingOperator {
    pub n: usize,
    pub n_c: usize,
    e_blocks: Vec<Vec<(usize, usize, f64)>>,
    z_offsets: Vec<usize>,
    pub c: DVector<f64>,
    /// Consensus components as global variable indices, owner first.
    pub groups: Vec<Vec<usize>>,
    /// Per group, the subsystem that owns the original variable and, per
    /// copy, the holding subsystem (ascending).
    pub group_owner: Vec<usize>,
    pub group_holders: Vec<Vec<usize>>,
    eet_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    star_shaped: bool,
    homogeneous: bool,
}

impl AveragingOperator {
    pub fn from_coupling(
        coupling: &Coupling,
        z_offsets: &[usize],
        n: usize,
    ) -> Result<Self, AdmmError> {
        let n_c = coupling.n_c;
        let mut eet_lu = None;
        if n_c > 0 {
            // sparse-aware Gram assembly: group triplets by global column
            let mut per_col: std::collections::HashMap<usize, Vec<(usize, f64)>> =
                std::collections::HashMap::new();
            for (i, block) in coupling.blocks.iter().enumerate() {
                for &(row, col, val) in block {
                    per_col
                        .entry(z_offsets[i] + col)
                        .or_default()
                        .push((row, val));
                }
            }
            let mut gram: DMatrix<f64> = DMatrix::zeros(n_c, n_c);
            for entries in per_col.values() {
                for &(r1, v1) in entries {
                    for &(r2, v2) in entries {
                        gram[(r1, r2)] += v1 * v2;
                    }
                }
            }
            let lu = gram.lu();
            let usable = (0..n_c).all(|i| lu.u()[(i, i)].abs() > 1e-12);
            if !usable {
                return Err(AdmmError::SingularCouplingGram);
            }
            eet_lu = Some(lu);
        }

        // derive consensus components from the +1/-1 pairs
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of: std::collections::HashMap<usize, usize> =
            std::collections::HashMap::new();
        let mut star_shaped = true;
        for &(orig, copy) in &coupling.pairs {
            if group_of.contains_key(&copy) {
                star_shaped = false;
            }
            let gid = *group_of.entry(orig).or_insert_with(|| {
                groups.push(vec![orig]);
                groups.len() - 1
            });
            groups[gid].push(copy);
            group_of.insert(copy, gid);
        }
        // a copy that is itself an original elsewhere breaks the star shape
        for &(orig, _) in &coupling.pairs {
            let gid = group_of[&orig];
            if groups[gid][0] != orig {
                star_shaped = false;
            }
        }
        let homogeneous = star_shaped && coupling.c.iter().all(|&v| v == 0.0);

        let sub_of = |global: usize| -> usize {
            match z_offsets.binary_search(&global) {
                Ok(i) => i,
                Err(i) => i - 1,
            }
        };
        let group_owner: Vec<usize> = groups.iter().map(|g| sub_of(g[0])).collect();
        let group_holders: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g[1..].iter().map(|&v| sub_of(v)).collect())
            .collect();

        Ok(Self {
            n,
            n_c,
            e_blocks: coupling.blocks.clone(),
            z_offsets: z_offsets.to_vec(),
            c: coupling.c.clone(),
            groups,
            group_owner,
            group_holders,
            eet_lu,
            star_shaped,
            homogeneous,
        })
    }

    pub fn apply_e(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_c);
        for (i, block) in self.e_blocks.iter().enumerate() {
            for &(row, col, val) in block {
                out[row] += val * v[self.z_offsets[i] + col];
            }
        }
        out
    }

    pub fn apply_e_t(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (i, block) in self.e_blocks.iter().enumerate() {
            for &(row, col, val) in block {
                out[self.z_offsets[i] + col] += val * lambda[row];
            }
        }
        out
    }

    /// `(EE')^{-1} w`.
    pub fn gram_solve(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.eet_lu {
            Some(lu) => lu.solve(w).expect("Gram factor verified at construction"),
            None => DVector::zeros(0),
        }
    }

    /// Consensus projection `M v + E'(EE')^{-1} c` via the factored form.
    pub fn project_affine(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.n_c == 0 {
            return v.clone();
        }
        let w = self.gram_solve(&(self.apply_e(v) - &self.c));
        v - self.apply_e_t(&w)
    }

    /// Linear part of the consensus projection, `v - E'(EE')^{-1}E v`.
    pub fn project_linear(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.n_c == 0 {
            return v.clone();
        }
        if self.homogeneous {
            return self.project_means(v);
        }
        let w = self.gram_solve(&self.apply_e(v));
        v - self.apply_e_t(&w)
    }

    /// Spectral norm of the stacked coupling matrix `E`.
    pub fn coupling_norm(&self) -> f64 {
        if self.n_c == 0 {
            return 0.0;
        }
        // largest eigenvalue of EE'; the Gram matrix is rebuilt sparsely
        let mut per_col: std::collections::HashMap<usize, Vec<(usize, f64)>> =
            std::collections::HashMap::new();
        for (i, block) in self.e_blocks.iter().enumerate() {
            for &(row, col, val) in block {
                per_col
                    .entry(self.z_offsets[i] + col)
                    .or_default()
                    .push((row, val));
            }
        }
        let mut gram: DMatrix<f64> = DMatrix::zeros(self.n_c, self.n_c);
        for entries in per_col.values() {
            for &(r1, v1) in entries {
                for &(r2, v2) in entries {
                    gram[(r1, r2)] += v1 * v2;
                }
            }
        }
        gram.symmetric_eigen().eigenvalues.max().max(0.0).sqrt()
    }

    /// Same map evaluated as exact per-component means; requires the
    /// homogeneous star pairing with zero right-hand side.
    pub fn project_means(&self, v: &DVector<f64>) -> DVector<f64> {
        debug_assert!(self.homogeneous);
        let mut z = v.clone();
        for group in &self.groups {
            let mean = group.iter().map(|&g| v[g]).sum::<f64>() / group.len() as f64;
            for &g in group {
                z[g] = mean;
            }
        }
        z
    }

    /// Best-precision consensus projection.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.homogeneous {
            self.project_means(v)
        } else {
            self.project_affine(v)
        }
    }

    /// Coupling multiplier produced by the averaging step:
    /// `lambda = rho (EE')^{-1} (E v - c)` for `v = y + gamma/rho`.
    pub fn recover_lambda(&self, v: &DVector<f64>, rho: f64) -> DVector<f64> {
        self.gram_solve(&(self.apply_e(v) - &self.c)) * rho
    }

    /// Distance of `gamma` from the row space of `E'` (the space dual
    /// iterates live in).
    pub fn rowspace_residual(&self, gamma: &DVector<f64>) -> f64 {
        if self.n_c == 0 {
            return gamma.norm();
        }
        let w = self.gram_solve(&self.apply_e(gamma));
        (gamma - self.apply_e_t(&w)).norm()
    }

    /// Dense `M = I - E'(EE')^{-1}E`.
    pub fn dense_m_avg(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(self.n, self.n);
        if self.n_c == 0 {
            return m;
        }
        let e = {
            let mut e = DMatrix::zeros(self.n_c, self.n);
            for (i, block) in self.e_blocks.iter().enumerate() {
                for &(row, col, val) in block {
                    e[(row, self.z_offsets[i] + col)] = val;
                }
            }
            e
        };
        let lu = self.eet_lu.as_ref().unwrap();
        let solved = lu.solve(&e).expect("Gram factor verified at construction");
        m -= e.transpose() * solved;
        m
    }

    pub fn is_star_shaped(&self) -> bool {
        self.star_shaped
    }
}

/// Centralized averaging step: returns the consensus iterate and the
/// recovered coupling multiplier.
pub fn averaging_centralized(
    op: &AveragingOperator,
    y: &DVector<f64>,
    gamma: &DVector<f64>,
    rho: f64,
) -> (DVector<f64>, DVector<f64>) {
    let v = y + gamma / rho;
    (op.project_affine(&v), op.recover_lambda(&v, rho))
}

/// Dual ascent step `gamma + rho (y - z)`, evaluated per subsystem without
/// communication.
pub fn dual_update(
    y: &DVector<f64>,
    z_next: &DVector<f64>,
    gamma: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    gamma + (y - z_next) * rho
}

/// Two-round neighbor-to-neighbor realization of the averaging step:
/// copy holders send their contributions to the variable owner, the owner
/// averages and scatters the result back.
pub fn averaging_decentralized(
    op: &AveragingOperator,
    v: &DVector<f64>,
    bus: &mut RoundBus,
) -> Result<DVector<f64>, AdmmError> {
    if !op.is_star_shaped() {
        return Err(AdmmError::NotStarShaped);
    }
    let n_groups = op.groups.len();

    // gather round: per (holder, owner) edge, holders send their copy
    // contributions for all shared groups in ascending group order
    let mut edges: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for gid in 0..n_groups {
        let owner = op.group_owner[gid];
        for (slot, &holder) in op.group_holders[gid].iter().enumerate() {
            edges
                .entry((holder, owner))
                .or_default()
                .push(gid * 8 + slot);
        }
    }
    for (&(holder, owner), slots) in &edges {
        let payload: Vec<f64> = slots
            .iter()
            .map(|&key| v[op.groups[key / 8][1 + key % 8]])
            .collect();
        bus.send(holder, owner, payload);
    }
    let mut gathered: std::collections::BTreeMap<(usize, usize), Vec<f64>> =
        std::collections::BTreeMap::new();
    for &(holder, owner) in edges.keys() {
        gathered.insert((holder, owner), bus.receive(holder, owner)?);
    }
    bus.end_round();

    // owners average: own value first, then holder contributions ascending
    let mut means = vec![0.0f64; n_groups];
    let mut cursor: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for gid in 0..n_groups {
        let owner = op.group_owner[gid];
        let mut acc = v[op.groups[gid][0]];
        for &holder in &op.group_holders[gid] {
            let key = (holder, owner);
            let pos = cursor.entry(key).or_insert(0);
            acc += gathered[&key][*pos];
            *pos += 1;
        }
        means[gid] = acc / (1 + op.group_holders[gid].len()) as f64;
    }

    // scatter round: owners send the averaged values back to the holders
    for (&(holder, owner), slots) in &edges {
        let payload: Vec<f64> = slots.iter().map(|&key| means[key / 8]).collect();
        bus.send(owner, holder, payload);
    }
    let mut z = v.clone();
    for (&(holder, owner), slots) in &edges {
        let payload = bus.receive(owner, holder)?;
        for (k, &key) in slots.iter().enumerate() {
            let gid = key / 8;
            let slot = key % 8;
            let copy_global = op.groups[gid][1 + slot];
            z[copy_global] = payload[k];
        }
    }
    bus.end_round();
    for gid in 0..n_groups {
        z[op.groups[gid][0]] = means[gid];
    }
    Ok(z)
}

/// Per-subsystem QP data of the two-block splitting at one linearization
/// point: original Hessian `h`, base linear term `q0` (gradient minus `h`
/// times the linearization point), and the linearized constraint polytope.
#[derive(Clone)]
pub struct LocalQpData {
    pub h: DMatrix<f64>,
    pub q0: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

/// Stacked layout over a list of per-subsystem QP blocks.
pub struct SplitQpData {
    pub locals: Vec<LocalQpData>,
    pub z_offsets: Vec<usize>,
    pub g_offsets: Vec<usize>,
    pub h_offsets: Vec<usize>,
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
}

impl SplitQpData {
    pub fn new(locals: Vec<LocalQpData>) -> Self {
        let s = locals.len();
        let mut z_offsets = Vec::with_capacity(s);
        let mut g_offsets = Vec::with_capacity(s);
        let mut h_offsets = Vec::with_capacity(s);
        let (mut n, mut n_g, mut n_h) = (0, 0, 0);
        for l in &locals {
            z_offsets.push(n);
            g_offsets.push(n_g);
            h_offsets.push(n_h);
            n += l.h.nrows();
            n_g += l.a_eq.nrows();
            n_h += l.a_in.nrows();
        }
        Self {
            locals,
            z_offsets,
            g_offsets,
            h_offsets,
            n,
            n_g,
            n_h,
        }
    }

    pub fn local_dim(&self, i: usize) -> usize {
        self.locals[i].h.nrows()
    }
}

pub struct AdmmSubproblem {
    pub data: SplitQpData,
    pub rho: f64,
    pub op: std::sync::Arc<AveragingOperator>,
    /// Augmented per-subsystem saddle factorizations (h + rho I, a_eq).
    factored: Vec<DenseBaseKkt>,
}

impl AdmmSubproblem {
    pub fn new(
        locals: Vec<LocalQpData>,
        rho: f64,
        op: std::sync::Arc<AveragingOperator>,
    ) -> Result<Self, AdmmError> {
        let data = SplitQpData::new(locals);
        if op.n != data.n {
            return Err(AdmmError::InconsistentDimensions(format!(
                "averaging operator over {} variables, blocks stack to {}",
                op.n, data.n
            )));
        }
        let mut factored = Vec::with_capacity(data.locals.len());
        for l in &data.locals {
            let h_aug = &l.h + DMatrix::identity(l.h.nrows(), l.h.nrows()) * rho;
            let base = DenseBaseKkt::factor(&h_aug, &l.a_eq).ok_or(QpError::NotStrictlyConvex)?;
            factored.push(base);
        }
        Ok(Self {
            data,
            rho,
            op,
            factored,
        })
    }

    /// Convenience constructor that derives the averaging operator from a
    /// coupling description.
    pub fn from_coupling(
        locals: Vec<LocalQpData>,
        rho: f64,
        coupling: &Coupling,
    ) -> Result<Self, AdmmError> {
        let data = SplitQpData::new(locals);
        let op = AveragingOperator::from_coupling(coupling, &data.z_offsets, data.n)?;
        Self::new(data.locals, rho, std::sync::Arc::new(op))
    }

    pub fn local_dim(&self, i: usize) -> usize {
        self.data.local_dim(i)
    }

    pub fn n(&self) -> usize {
        self.data.n
    }

    /// Solves subsystem `i`'s augmented QP for the current consensus iterate
    /// and scaled dual: `min f_qp(y) + gamma'y + rho/2 |y - z|^2` over the
    /// local constraint set.
    pub fn solve_local(
        &self,
        i: usize,
        z_i: &DVector<f64>,
        gamma_i: &DVector<f64>,
        warm: Option<&[usize]>,
        tol: f64,
    ) -> Result<QpSolution, QpError> {
        let l = &self.data.locals[i];
        let q = &l.q0 + gamma_i - z_i * self.rho;
        let engine = QpEngine::new(&self.factored[i], &l.a_in, &l.b_in);
        engine.solve(&q, &l.b_eq, warm, tol)
    }
}

#[derive(Clone, Debug)]
pub struct AdmmState {
    pub z: DVector<f64>,
    pub gamma: DVector<f64>,
    pub y: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    /// Coupling multiplier from the last averaging step; centralized mode only.
    pub lambda: Option<DVector<f64>>,
    pub active_sets: Vec<Vec<usize>>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Centralized,
    Decentralized,
}

pub struct AdmmOptions {
    pub l_max: usize,
    pub mode: ExecutionMode,
    pub qp_tol: f64,
}

/// A full ADMM run: exactly `l_max` rounds of local solves, averaging, and
/// dual update, starting from `(z0, gamma0)`.
///
/// `observer` is called after every iteration with the iteration index and
/// the current state (used by the certificate validation paths).
pub fn admm_run(
    sub: &AdmmSubproblem,
    z0: &DVector<f64>,
    gamma0: &DVector<f64>,
    opts: &AdmmOptions,
    mut bus: Option<&mut RoundBus>,
    mut observer: Option<&mut dyn FnMut(usize, &AdmmState)>,
    warm_active: Option<&[Vec<usize>]>,
) -> Result<AdmmState, AdmmError> {
    if z0.len() != sub.n() || gamma0.len() != sub.n() {
        return Err(AdmmError::InconsistentDimensions(format!(
            "z0/gamma0 length {} vs problem dimension {}",
            z0.len(),
            sub.n()
        )));
    }
    if opts.l_max == 0 {
        return Err(AdmmError::InconsistentDimensions(
            "l_max must be at least 1".into(),
        ));
    }
    let s = sub.data.locals.len();
    let mut z = z0.clone();
    let mut gamma = gamma0.clone();
    let mut active: Vec<Vec<usize>> = match warm_active {
        Some(w) if w.len() == s => w.to_vec(),
        _ => vec![Vec::new(); s],
    };
    let mut state = AdmmState {
        z: z.clone(),
        gamma: gamma.clone(),
        y: DVector::zeros(sub.data.n),
        nu: DVector::zeros(sub.data.n_g),
        mu: DVector::zeros(sub.data.n_h),
        lambda: None,
        active_sets: active.clone(),
        iterations: 0,
    };

    let mut own_bus;
    let bus_ref: Option<&mut RoundBus> = match (&opts.mode, bus.take()) {
        (ExecutionMode::Decentralized, Some(b)) => Some(b),
        (ExecutionMode::Decentralized, None) => {
            own_bus = RoundBus::new(false);
            Some(&mut own_bus)
        }
        _ => None,
    };
    let mut bus_ref = bus_ref;

    for l in 0..opts.l_max {
        let mut y = DVector::zeros(sub.data.n);
        let mut nu = DVector::zeros(sub.data.n_g);
        let mut mu = DVector::zeros(sub.data.n_h);
        for i in 0..s {
            let z_i = z.rows(sub.data.z_offsets[i], sub.local_dim(i)).into_owned();
            let g_i = gamma
                .rows(sub.data.z_offsets[i], sub.local_dim(i))
                .into_owned();
            let sol = sub.solve_local(i, &z_i, &g_i, Some(&active[i]), opts.qp_tol)?;
            y.rows_mut(sub.data.z_offsets[i], sub.local_dim(i))
                .copy_from(&sol.y);
            nu.rows_mut(sub.data.g_offsets[i], sub.data.locals[i].a_eq.nrows())
                .copy_from(&sol.eq_multipliers);
            mu.rows_mut(sub.data.h_offsets[i], sub.data.locals[i].a_in.nrows())
                .copy_from(&sol.ineq_multipliers);
            active[i] = sol.active_set;
        }

        let v = &y + &gamma / sub.rho;
        let (z_next, lambda) = match opts.mode {
            ExecutionMode::Centralized => {
                let z_next = sub.op.project(&v);
                let lambda = sub.op.recover_lambda(&v, sub.rho);
                (z_next, Some(lambda))
            }
            ExecutionMode::Decentralized => {
                let b = bus_ref.as_mut().expect("bus present in decentralized mode");
                (averaging_decentralized(&sub.op, &v, b)?, None)
            }
        };
        debug_assert!(
            sub.n_c() == 0 || (sub.op.apply_e(&z_next) - &sub.op.c).abs().max() <= 1e-10,
            "consensus feasibility violated after averaging"
        );
        gamma = dual_update(&y, &z_next, &gamma, sub.rho);
        z = z_next;

        state = AdmmState {
            z: z.clone(),
            gamma: gamma.clone(),
            y,
            nu,
            mu,
            lambda,
            active_sets: active.clone(),
            iterations: l + 1,
        };
        if let Some(obs) = observer.as_mut() {
            obs(l, &state);
        }
    }
    Ok(state)
}

impl AdmmSubproblem {
    pub fn n_c(&self) -> usize {
        self.op.n_c
    }
}

/// Stacked primal-dual solution of the underlying QP (the fixed point ADMM
/// converges to), solved directly through the partitioned saddle system.
pub struct StackedQpSolution {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub lambda: DVector<f64>,
    pub active_sets: Vec<Vec<usize>>,
    pub iterations: usize,
}

pub fn solve_stacked_qp(
    data: &SplitQpData,
    coupling: &Coupling,
    warm: Option<&[usize]>,
    tol: f64,
) -> Result<StackedQpSolution, AdmmError> {
    let s = data.locals.len();
    let h_blocks: Vec<DMatrix<f64>> = data.locals.iter().map(|l| l.h.clone()).collect();
    let j_blocks: Vec<DMatrix<f64>> = data.locals.iter().map(|l| l.a_eq.clone()).collect();
    let base = BlockBaseKkt::factor(&h_blocks, &j_blocks, coupling).ok_or(QpError::SingularKkt)?;

    let mut q = DVector::zeros(data.n);
    let mut b_eq = DVector::zeros(data.n_g + coupling.n_c);
    let mut a_in = DMatrix::zeros(data.n_h, data.n);
    let mut b_in = DVector::zeros(data.n_h);
    for i in 0..s {
        let l = &data.locals[i];
        q.rows_mut(data.z_offsets[i], l.h.nrows()).copy_from(&l.q0);
        b_eq.rows_mut(data.g_offsets[i], l.a_eq.nrows())
            .copy_from(&l.b_eq);
        a_in.view_mut(
            (data.h_offsets[i], data.z_offsets[i]),
            (l.a_in.nrows(), l.h.nrows()),
        )
        .copy_from(&l.a_in);
        b_in.rows_mut(data.h_offsets[i], l.b_in.len())
            .copy_from(&l.b_in);
    }
    b_eq.rows_mut(data.n_g, coupling.n_c).copy_from(&coupling.c);

    let sol = crate::qp::solve_with_base(&base, &q, &b_eq, &a_in, &b_in, warm, tol)?;
    let mut active_sets = vec![Vec::new(); s];
    for &j in &sol.active_set {
        let i = match data.h_offsets.binary_search(&j) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        active_sets[i].push(j - data.h_offsets[i]);
    }
    Ok(StackedQpSolution {
        z: sol.y,
        nu: sol.eq_multipliers.rows(0, data.n_g).into_owned(),
        lambda: sol.eq_multipliers.rows(data.n_g, coupling.n_c).into_owned(),
        mu: sol.ineq_multipliers,
        active_sets,
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, spectral_norm_dense, standard_normal};

    /// Two scalar subsystems with a single shared variable.
    fn pair_coupling() -> Coupling {
        Coupling {
            n_c: 1,
            c: DVector::zeros(1),
            blocks: vec![vec![(0, 0, 1.0)], vec![(0, 0, -1.0)]],
            pairs: vec![(0, 1)],
            groups: vec![vec![0, 1]],
        }
    }

    fn scalar_local(center: f64) -> LocalQpData {
        LocalQpData {
            h: DMatrix::identity(1, 1),
            q0: DVector::from_element(1, -center),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, 1),
            b_in: DVector::zeros(0),
        }
    }

    #[test]
    fn two_quadratics_reach_consensus_mean() {
        let coupling = pair_coupling();
        let sub = AdmmSubproblem::from_coupling(
            vec![scalar_local(1.0), scalar_local(3.0)],
            1.0,
            &coupling,
        )
        .unwrap();
        let opts = AdmmOptions {
            l_max: 30,
            mode: ExecutionMode::Centralized,
            qp_tol: 1e-10,
        };
        let out = admm_run(
            &sub,
            &DVector::zeros(2),
            &DVector::zeros(2),
            &opts,
            None,
            None,
            None,
        )
        .unwrap();
        assert!(
            (out.z[0] - 2.0).abs() <= 1e-6,
            "consensus value {}",
            out.z[0]
        );
        assert!((out.z[1] - 2.0).abs() <= 1e-6);
    }

    #[test]
    fn fixed_point_stays_fixed() {
        let coupling = pair_coupling();
        let sub = AdmmSubproblem::from_coupling(
            vec![scalar_local(1.0), scalar_local(3.0)],
            1.0,
            &coupling,
        )
        .unwrap();
        let star = solve_stacked_qp(&sub.data, &coupling, None, 1e-12).unwrap();
        let gamma_star = sub.op.apply_e_t(&star.lambda);
        let opts = AdmmOptions {
            l_max: 25,
            mode: ExecutionMode::Centralized,
            qp_tol: 1e-12,
        };
        let mut worst = 0.0f64;
        let mut obs = |_l: usize, st: &AdmmState| {
            worst = worst.max((&st.z - &star.z).abs().max());
        };
        admm_run(
            &sub,
            &star.z,
            &gamma_star,
            &opts,
            None,
            Some(&mut obs),
            None,
        )
        .unwrap();
        assert!(worst <= 1e-8, "drift from fixed point {worst}");
    }

    #[test]
    fn averaging_matrix_identities() {
        let coupling = pair_coupling();
        let op = AveragingOperator::from_coupling(&coupling, &[0, 1], 2).unwrap();
        let m = op.dense_m_avg();
        assert!((&m * &m - &m).abs().max() <= 1e-12, "idempotence");
        let e = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert!((&e * &m).abs().max() <= 1e-12, "E M = 0");
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]));
    }

    #[test]
    fn dual_update_identities() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let gamma = DVector::from_vec(vec![0.3, -0.2]);
        assert_eq!(dual_update(&y, &y, &gamma, 1.0), gamma);
        let z = DVector::from_vec(vec![0.0, 2.0]);
        let g2 = dual_update(&y, &z, &DVector::zeros(2), 1.0);
        assert_eq!(g2, DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn gamma_stays_in_rowspace_and_consensus_feasible() {
        let mut rng = seeded_rng(4);
        // three subsystems, middle one copies both neighbors
        let coupling = Coupling {
            n_c: 2,
            c: DVector::zeros(2),
            blocks: vec![
                vec![(0, 0, 1.0)],
                vec![(0, 1, -1.0), (1, 2, -1.0)],
                vec![(1, 0, 1.0)],
            ],
            pairs: vec![(0, 2), (4, 3)],
            groups: vec![vec![0, 2], vec![4, 3]],
        };
        let mk = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let a = DMatrix::from_fn(n, n, |_, _| standard_normal(rng));
            LocalQpData {
                h: &a * a.transpose() + DMatrix::identity(n, n),
                q0: DVector::from_fn(n, |_, _| standard_normal(rng)),
                a_eq: DMatrix::zeros(0, n),
                b_eq: DVector::zeros(0),
                a_in: DMatrix::zeros(0, n),
                b_in: DVector::zeros(0),
            }
        };
        let sub = AdmmSubproblem::from_coupling(
            vec![mk(1, &mut rng), mk(3, &mut rng), mk(1, &mut rng)],
            1.0,
            &coupling,
        )
        .unwrap();
        let lambda0 = DVector::from_fn(2, |_, _| standard_normal(&mut rng));
        let gamma0 = sub.op.apply_e_t(&lambda0);
        let opts = AdmmOptions {
            l_max: 12,
            mode: ExecutionMode::Centralized,
            qp_tol: 1e-12,
        };
        let mut obs = |_l: usize, st: &AdmmState| {
            assert!(
                sub.op.apply_e(&st.z).abs().max() <= 1e-10,
                "consensus feasibility"
            );
            let scale = 1.0 + st.gamma.norm();
            assert!(
                sub.op.rowspace_residual(&st.gamma) / scale <= 1e-10,
                "gamma left the coupling row space"
            );
            // the dual update reproduces gamma = E' lambda with the recovered lambda
            if let Some(lam) = &st.lambda {
                let diff = (&st.gamma - sub.op.apply_e_t(lam)).abs().max();
                assert!(diff <= 1e-10, "lambda recovery mismatch {diff}");
            }
        };
        admm_run(
            &sub,
            &DVector::zeros(5),
            &gamma0,
            &opts,
            None,
            Some(&mut obs),
            None,
        )
        .unwrap();
    }

    #[test]
    fn decentralized_matches_centralized_projection() {
        let mut rng = seeded_rng(8);
        // chain of 4 subsystems with 2 copied components each side
        let mut blocks = vec![Vec::new(); 4];
        let mut pairs = Vec::new();
        let dims = [3usize, 5, 5, 3];
        let offsets = [0usize, 3, 8, 13];
        let mut row = 0;
        // each holder stores copies in its trailing slots, assigned in the
        // order the owners are visited
        let mut next_slot = [2usize, 3, 3, 2];
        // owners: var 0 of each subsystem copied by each neighbor
        for i in 0..4usize {
            let mut holders = Vec::new();
            if i > 0 {
                holders.push(i - 1);
            }
            if i + 1 < 4 {
                holders.push(i + 1);
            }
            for &hld in holders.iter() {
                blocks[i].push((row, 0, 1.0));
                let copy_col = next_slot[hld];
                next_slot[hld] += 1;
                assert!(copy_col < dims[hld]);
                blocks[hld].push((row, copy_col, -1.0));
                pairs.push((offsets[i], offsets[hld] + copy_col));
                row += 1;
            }
        }
        let coupling = Coupling {
            n_c: row,
            c: DVector::zeros(row),
            blocks,
            pairs: pairs.clone(),
            groups: Vec::new(),
        };
        let n = 16;
        let op = AveragingOperator::from_coupling(&coupling, &offsets, n).unwrap();
        let m_dense = op.dense_m_avg();
        for _ in 0..20 {
            let v = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
            let mut bus = RoundBus::new(false);
            let z_dec = averaging_decentralized(&op, &v, &mut bus).unwrap();
            let z_cen = op.project_means(&v);
            assert!(
                (&z_dec - &z_cen).abs().max() == 0.0,
                "exact agreement expected"
            );
            let z_aff = &m_dense * &v;
            assert!((&z_dec - &z_aff).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn uncoupled_variables_pass_through() {
        let coupling = pair_coupling();
        // add an extra uncoupled variable to subsystem 0
        let mut blocks = coupling.blocks.clone();
        blocks[0] = vec![(0, 0, 1.0)];
        let coupling = Coupling {
            n_c: 1,
            c: DVector::zeros(1),
            blocks,
            pairs: vec![(0, 2)],
            groups: vec![vec![0, 2]],
        };
        let op = AveragingOperator::from_coupling(&coupling, &[0, 2], 4).unwrap();
        let v = DVector::from_vec(vec![1.0, 7.0, 3.0, -2.0]);
        let mut bus = RoundBus::new(false);
        let z = averaging_decentralized(&op, &v, &mut bus).unwrap();
        assert_eq!(z[1], 7.0);
        assert_eq!(z[3], -2.0);
        assert_eq!(z[0], 2.0);
        assert_eq!(z[2], 2.0);
    }

    #[test]
    fn lambda_norm_bound_of_averaging_block() {
        // |[M; (EE')^{-1}E rho][I I]| for the scalar pair at rho = 1 is sqrt(2)
        let coupling = pair_coupling();
        let op = AveragingOperator::from_coupling(&coupling, &[0, 1], 2).unwrap();
        let m = op.dense_m_avg();
        let e = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let gram_inv_e = &e / 2.0;
        let mut top = DMatrix::zeros(3, 2);
        top.view_mut((0, 0), (2, 2)).copy_from(&m);
        top.view_mut((2, 0), (1, 2)).copy_from(&gram_inv_e);
        let mut d1 = DMatrix::zeros(3, 4);
        d1.view_mut((0, 0), (3, 2)).copy_from(&top);
        d1.view_mut((0, 2), (3, 2)).copy_from(&top);
        let norm = spectral_norm_dense(&d1);
        assert!((norm - 2.0f64.sqrt()).abs() < 1e-12);
    }
}
