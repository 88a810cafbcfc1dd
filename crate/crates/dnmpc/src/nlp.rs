//! Partially separable NLPs with consensus coupling.
//!
//! A problem is a list of subsystems, each with its own objective, equality
//! and inequality constraints over local variables `z_i`, plus linear
//! consensus constraints `sum_i E_i z_i = c` that match original trajectory
//! variables with the copies held by neighbors. Optimal control problems are
//! lowered into this form by [`assemble_nlp`].

use crate::models::OcpModel;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("consensus row {0} does not couple exactly two subsystems with +1/-1")]
    NonTwoAssigned(usize),
    #[error("coupling matrix is row-rank deficient")]
    RankDeficientCoupling,
    #[error("invalid problem description: {0}")]
    InvalidSpec(String),
}

/// Callbacks of one subsystem. All evaluations must be deterministic.
pub trait SubsystemFunctions: Send + Sync {
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Hessian of `f_i + nu' g_i + mu' h_i` with respect to `z_i`.
    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        nu: &DVector<f64>,
        mu: &DVector<f64>,
    ) -> DMatrix<f64>;
    fn eq(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn ineq(&self, z: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
}

/// Least-squares structure of a subsystem objective `0.5 |M z - m|^2`,
/// providing the constant positive definite Hessian approximation `M'M`.
#[derive(Clone, Debug)]
pub struct GaussNewton {
    pub factor: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

pub struct SubsystemProblem {
    pub index: usize,
    pub dim: usize,
    pub eq_dim: usize,
    pub ineq_dim: usize,
    pub functions: Box<dyn SubsystemFunctions>,
    pub gauss_newton: Option<GaussNewton>,
}

/// Consensus coupling `sum_i E_i z_i = c` in sparse triplet form.
pub struct Coupling {
    pub n_c: usize,
    pub c: DVector<f64>,
    /// Per subsystem: (row, local column, coefficient).
    pub blocks: Vec<Vec<(usize, usize, f64)>>,
    /// Per row, the two participants as global variable indices: (+1, -1).
    pub pairs: Vec<(usize, usize)>,
    /// Connected components of the pairing: owner variable first, then the
    /// copies in the order their rows appear.
    pub groups: Vec<Vec<usize>>,
}

impl Coupling {
    pub fn empty(n_subsystems: usize) -> Self {
        Self {
            n_c: 0,
            c: DVector::zeros(0),
            blocks: vec![Vec::new(); n_subsystems],
            pairs: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn apply(&self, z: &DVector<f64>, offsets: &[usize]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_c);
        for (i, block) in self.blocks.iter().enumerate() {
            for &(row, col, val) in block {
                out[row] += val * z[offsets[i] + col];
            }
        }
        out
    }

    pub fn apply_transpose(
        &self,
        lambda: &DVector<f64>,
        offsets: &[usize],
        n: usize,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (i, block) in self.blocks.iter().enumerate() {
            for &(row, col, val) in block {
                out[offsets[i] + col] += val * lambda[row];
            }
        }
        out
    }

    /// Dense stacked `E` (n_c x n).
    pub fn to_dense(&self, offsets: &[usize], n: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_c, n);
        for (i, block) in self.blocks.iter().enumerate() {
            for &(row, col, val) in block {
                e[(row, offsets[i] + col)] = val;
            }
        }
        e
    }
}

pub struct PartitionedNlp {
    pub subsystems: Vec<SubsystemProblem>,
    pub coupling: Coupling,
    pub z_offsets: Vec<usize>,
    pub g_offsets: Vec<usize>,
    pub h_offsets: Vec<usize>,
    pub n: usize,
    pub n_g: usize,
    pub n_h: usize,
    /// Sorted in-neighbors per subsystem, derived from shared coupling rows.
    pub in_neighbors: Vec<Vec<usize>>,
    pub out_neighbors: Vec<Vec<usize>>,
    /// Layout metadata when the problem was assembled from an OCP.
    pub ocp_layout: Option<Vec<SubsystemLayout>>,
}

impl PartitionedNlp {
    pub fn new(subsystems: Vec<SubsystemProblem>, coupling: Coupling) -> Result<Self, NlpError> {
        let s = subsystems.len();
        if coupling.blocks.len() != s {
            return Err(NlpError::DimensionMismatch(format!(
                "coupling has {} blocks for {} subsystems",
                coupling.blocks.len(),
                s
            )));
        }
        let mut z_offsets = Vec::with_capacity(s);
        let mut g_offsets = Vec::with_capacity(s);
        let mut h_offsets = Vec::with_capacity(s);
        let (mut n, mut n_g, mut n_h) = (0usize, 0usize, 0usize);
        for sub in &subsystems {
            z_offsets.push(n);
            g_offsets.push(n_g);
            h_offsets.push(n_h);
            n += sub.dim;
            n_g += sub.eq_dim;
            n_h += sub.ineq_dim;
        }

        // validate the two-assignment structure and derive the graph
        let mut row_entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coupling.n_c];
        for (i, block) in coupling.blocks.iter().enumerate() {
            for &(row, col, val) in block {
                if row >= coupling.n_c || col >= subsystems[i].dim {
                    return Err(NlpError::DimensionMismatch(format!(
                        "coupling entry ({row},{col}) out of range in subsystem {i}"
                    )));
                }
                row_entries[row].push((i, val));
            }
        }
        let mut in_neighbors = vec![Vec::new(); s];
        let mut out_neighbors = vec![Vec::new(); s];
        for (row, entries) in row_entries.iter().enumerate() {
            if entries.len() != 2 {
                return Err(NlpError::NonTwoAssigned(row));
            }
            let (a, b) = (entries[0], entries[1]);
            let signs_ok = (a.1 - 1.0).abs() < 1e-14 && (b.1 + 1.0).abs() < 1e-14
                || (a.1 + 1.0).abs() < 1e-14 && (b.1 - 1.0).abs() < 1e-14;
            if a.0 == b.0 || !signs_ok {
                return Err(NlpError::NonTwoAssigned(row));
            }
            let (owner, holder) = if a.1 > 0.0 { (a.0, b.0) } else { (b.0, a.0) };
            // holder copies owner state: owner -> holder edge
            if !in_neighbors[holder].contains(&owner) {
                in_neighbors[holder].push(owner);
            }
            if !out_neighbors[owner].contains(&holder) {
                out_neighbors[owner].push(holder);
            }
        }
        for list in in_neighbors.iter_mut().chain(out_neighbors.iter_mut()) {
            list.sort_unstable();
        }

        let nlp = Self {
            subsystems,
            coupling,
            z_offsets,
            g_offsets,
            h_offsets,
            n,
            n_g,
            n_h,
            in_neighbors,
            out_neighbors,
            ocp_layout: None,
        };

        if nlp.coupling.n_c > 0 {
            // full row rank via the Gram matrix of E
            let e = nlp.dense_coupling();
            let gram = &e * e.transpose();
            let scale = gram.diagonal().max().max(1.0);
            if crate::linalg::min_eig_symmetric(&gram) <= 1e-12 * scale {
                return Err(NlpError::RankDeficientCoupling);
            }
        }
        Ok(nlp)
    }

    pub fn subsystem_count(&self) -> usize {
        self.subsystems.len()
    }

    pub fn n_c(&self) -> usize {
        self.coupling.n_c
    }

    pub fn dense_coupling(&self) -> DMatrix<f64> {
        self.coupling.to_dense(&self.z_offsets, self.n)
    }

    pub fn z_slice<'a>(&self, z: &'a DVector<f64>, i: usize) -> DVector<f64> {
        z.rows(self.z_offsets[i], self.subsystems[i].dim)
            .into_owned()
    }

    pub fn nu_slice<'a>(&self, nu: &'a DVector<f64>, i: usize) -> DVector<f64> {
        nu.rows(self.g_offsets[i], self.subsystems[i].eq_dim)
            .into_owned()
    }

    pub fn mu_slice<'a>(&self, mu: &'a DVector<f64>, i: usize) -> DVector<f64> {
        mu.rows(self.h_offsets[i], self.subsystems[i].ineq_dim)
            .into_owned()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        (0..self.subsystem_count())
            .map(|i| self.subsystems[i].functions.objective(&self.z_slice(z, i)))
            .sum()
    }
}

/// A primal-dual point `(z, nu, mu, lambda)`.
#[derive(Clone, Debug)]
pub struct PrimalDualPoint {
    pub z: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(nlp: &PartitionedNlp) -> Self {
        Self {
            z: DVector::zeros(nlp.n),
            nu: DVector::zeros(nlp.n_g),
            mu: DVector::zeros(nlp.n_h),
            lambda: DVector::zeros(nlp.n_c()),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.z.norm_squared()
            + self.nu.norm_squared()
            + self.mu.norm_squared()
            + self.lambda.norm_squared())
        .sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        ((&self.z - &other.z).norm_squared()
            + (&self.nu - &other.nu).norm_squared()
            + (&self.mu - &other.mu).norm_squared()
            + (&self.lambda - &other.lambda).norm_squared())
        .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
            && self.nu.iter().all(|v| v.is_finite())
            && self.mu.iter().all(|v| v.is_finite())
            && self.lambda.iter().all(|v| v.is_finite())
    }
}

/// Max-norm KKT residual of the partitioned NLP at a primal-dual point:
/// stationarity, equality/consensus feasibility, inequality violation,
/// complementarity, and multiplier sign.
pub fn kkt_residual(nlp: &PartitionedNlp, p: &PrimalDualPoint) -> f64 {
    assert_eq!(p.z.len(), nlp.n, "primal dimension mismatch");
    assert_eq!(p.nu.len(), nlp.n_g);
    assert_eq!(p.mu.len(), nlp.n_h);
    assert_eq!(p.lambda.len(), nlp.n_c());

    let mut worst: f64 = 0.0;
    let et_lambda = nlp
        .coupling
        .apply_transpose(&p.lambda, &nlp.z_offsets, nlp.n);
    for i in 0..nlp.subsystem_count() {
        let z_i = nlp.z_slice(&p.z, i);
        let nu_i = nlp.nu_slice(&p.nu, i);
        let mu_i = nlp.mu_slice(&p.mu, i);
        let f = &nlp.subsystems[i].functions;
        let mut stat = f.gradient(&z_i);
        if nlp.subsystems[i].eq_dim > 0 {
            stat += f.eq_jacobian(&z_i).transpose() * &nu_i;
        }
        if nlp.subsystems[i].ineq_dim > 0 {
            stat += f.ineq_jacobian(&z_i).transpose() * &mu_i;
        }
        stat += et_lambda.rows(nlp.z_offsets[i], nlp.subsystems[i].dim);
        worst = worst.max(stat.abs().max());

        let g = f.eq(&z_i);
        if g.len() > 0 {
            worst = worst.max(g.abs().max());
        }
        let h = f.ineq(&z_i);
        for j in 0..h.len() {
            worst = worst.max(h[j].max(0.0));
            worst = worst.max((mu_i[j] * h[j]).abs());
            worst = worst.max((-mu_i[j]).max(0.0));
        }
    }
    if nlp.n_c() > 0 {
        let cons = nlp.coupling.apply(&p.z, &nlp.z_offsets) - &nlp.coupling.c;
        worst = worst.max(cons.abs().max());
    }
    worst
}

// ---------------------------------------------------------------------------
// OCP lowering
// ---------------------------------------------------------------------------

/// Which shooting nodes of a neighbor trajectory are copied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopySpan {
    /// Stages 0..N-1, exactly the nodes the shooting constraints reference.
    DynamicsOnly,
    /// Stages 0..N, the full predicted trajectory.
    FullHorizon,
}

#[derive(Clone, Debug)]
pub struct CopyBlock {
    pub neighbor: usize,
    pub components: Vec<usize>,
    pub offset: usize,
}

/// Variable layout of one subsystem's decision vector: predicted states,
/// inputs, then neighbor-state copies in ascending neighbor order.
#[derive(Clone, Debug)]
pub struct SubsystemLayout {
    pub index: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub input_stages: usize,
    pub copy_stages: usize,
    pub copy_blocks: Vec<CopyBlock>,
    pub inputs_offset: usize,
    pub copies_offset: usize,
    pub dim: usize,
}

impl SubsystemLayout {
    pub fn state_offset(&self, stage: usize) -> usize {
        self.n_x * stage
    }
    pub fn input_offset(&self, stage: usize) -> usize {
        self.inputs_offset + self.n_u * stage
    }
    pub fn copy_offset(&self, block: usize, stage: usize) -> usize {
        let b = &self.copy_blocks[block];
        b.offset + b.components.len() * stage
    }
}

pub struct OcpSpec {
    pub model: Arc<dyn OcpModel>,
    pub horizon: usize,
    pub shooting_interval: f64,
    pub q_weights: Vec<DMatrix<f64>>,
    pub r_weights: Vec<DMatrix<f64>>,
    pub terminal_weights: Vec<DMatrix<f64>>,
    pub beta: f64,
    pub beta2: f64,
    /// Per subsystem, elementwise input bounds; empty pair means unbounded.
    pub input_bounds: Vec<Option<(DVector<f64>, DVector<f64>)>>,
    pub state_bounds: Vec<Option<(DVector<f64>, DVector<f64>)>>,
    pub copy_penalty: f64,
    pub copy_span: CopySpan,
    /// Keep a (costed) input variable at the terminal node. The benchmark
    /// transcription carries it; it decouples from the rest of the problem.
    pub trailing_input: bool,
}

impl OcpSpec {
    pub fn validate(&self) -> Result<(), NlpError> {
        let s = self.model.subsystem_count();
        if self.q_weights.len() != s
            || self.r_weights.len() != s
            || self.terminal_weights.len() != s
            || self.input_bounds.len() != s
            || self.state_bounds.len() != s
        {
            return Err(NlpError::DimensionMismatch(
                "per-subsystem weight/bound lists must match the subsystem count".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(NlpError::InvalidSpec("horizon must be at least 1".into()));
        }
        if self.shooting_interval <= 0.0 {
            return Err(NlpError::InvalidSpec(
                "shooting interval must be positive".into(),
            ));
        }
        if self.beta < 1.0 || self.beta2 < 1.0 {
            return Err(NlpError::InvalidSpec(
                "beta and beta2 must be at least 1".into(),
            ));
        }
        if self.copy_penalty <= 0.0 {
            return Err(NlpError::InvalidSpec(
                "copy penalty must be positive".into(),
            ));
        }
        for i in 0..s {
            for (name, m, d) in [
                ("Q", &self.q_weights[i], self.model.state_dim(i)),
                ("R", &self.r_weights[i], self.model.input_dim(i)),
                ("P", &self.terminal_weights[i], self.model.state_dim(i)),
            ] {
                if m.nrows() != d || m.ncols() != d {
                    return Err(NlpError::DimensionMismatch(format!(
                        "{name} weight of subsystem {i} has shape {}x{}, expected {d}x{d}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                if d > 0 && nalgebra::Cholesky::new(m.clone()).is_none() {
                    return Err(NlpError::InvalidSpec(format!(
                        "{name} weight of subsystem {i} is not positive definite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self, i: usize) -> SubsystemLayout {
        let n_x = self.model.state_dim(i);
        let n_u = self.model.input_dim(i);
        let n = self.horizon;
        let input_stages = if self.trailing_input { n + 1 } else { n };
        let copy_stages = match self.copy_span {
            CopySpan::DynamicsOnly => n,
            CopySpan::FullHorizon => n + 1,
        };
        let inputs_offset = (n + 1) * n_x;
        let copies_offset = inputs_offset + input_stages * n_u;
        let mut copy_blocks = Vec::new();
        let mut offset = copies_offset;
        for j in self.model.in_neighbors(i) {
            let components = self.model.coupled_components(j);
            copy_blocks.push(CopyBlock {
                neighbor: j,
                components: components.clone(),
                offset,
            });
            offset += components.len() * copy_stages;
        }
        SubsystemLayout {
            index: i,
            n_x,
            n_u,
            horizon: n,
            input_stages,
            copy_stages,
            copy_blocks,
            inputs_offset,
            copies_offset,
            dim: offset,
        }
    }
}

/// Lowers an OCP into the partially separable form: per-subsystem shooting
/// constraints with copied neighbor trajectories, box inequality constraints,
/// quadratic objectives with the copy regularization, and one consensus row
/// per (copy, stage, component) with +1 on the original and -1 on the copy.
pub fn assemble_nlp(spec: &OcpSpec, x_now: &[DVector<f64>]) -> Result<PartitionedNlp, NlpError> {
    spec.validate()?;
    let s = spec.model.subsystem_count();
    if x_now.len() != s {
        return Err(NlpError::DimensionMismatch(format!(
            "{} initial states for {} subsystems",
            x_now.len(),
            s
        )));
    }
    for i in 0..s {
        if x_now[i].len() != spec.model.state_dim(i) {
            return Err(NlpError::DimensionMismatch(format!(
                "initial state of subsystem {i} has length {}, expected {}",
                x_now[i].len(),
                spec.model.state_dim(i)
            )));
        }
    }

    let layouts: Vec<SubsystemLayout> = (0..s).map(|i| spec.layout(i)).collect();

    let mut subsystems = Vec::with_capacity(s);
    for i in 0..s {
        let layout = layouts[i].clone();
        let n_h = ineq_count(spec, &layout);
        let sub = OcpSubsystem {
            model: spec.model.clone(),
            layout: layout.clone(),
            q: spec.q_weights[i].clone(),
            r: spec.r_weights[i].clone(),
            p_term: spec.terminal_weights[i].clone() * (spec.beta * spec.beta2),
            copy_penalty: spec.copy_penalty,
            h_step: spec.shooting_interval,
            input_bounds: spec.input_bounds[i].clone(),
            state_bounds: spec.state_bounds[i].clone(),
            x_now: x_now[i].clone(),
        };
        let gauss_newton = sub.gauss_newton();
        subsystems.push(SubsystemProblem {
            index: i,
            dim: layout.dim,
            eq_dim: (layout.horizon + 1) * layout.n_x,
            ineq_dim: n_h,
            functions: Box::new(sub),
            gauss_newton: Some(gauss_newton),
        });
    }

    // consensus rows: grouped by copy holder, then neighbor, stage, component
    let mut blocks: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); s];
    let mut pairs = Vec::new();
    let mut groups_map: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let z_offsets: Vec<usize> = layouts
        .iter()
        .scan(0usize, |acc, l| {
            let off = *acc;
            *acc += l.dim;
            Some(off)
        })
        .collect();
    let mut row = 0usize;
    for i in 0..s {
        let layout = &layouts[i];
        for (b_idx, block) in layout.copy_blocks.iter().enumerate() {
            let owner = block.neighbor;
            for stage in 0..layout.copy_stages {
                for (c_idx, &comp) in block.components.iter().enumerate() {
                    let owner_col = layouts[owner].state_offset(stage) + comp;
                    let copy_col = layout.copy_offset(b_idx, stage) + c_idx;
                    blocks[owner].push((row, owner_col, 1.0));
                    blocks[i].push((row, copy_col, -1.0));
                    let owner_global = z_offsets[owner] + owner_col;
                    let copy_global = z_offsets[i] + copy_col;
                    pairs.push((owner_global, copy_global));
                    let gid = *groups_map.entry(owner_global).or_insert_with(|| {
                        groups.push(vec![owner_global]);
                        groups.len() - 1
                    });
                    groups[gid].push(copy_global);
                    row += 1;
                }
            }
        }
    }
    let coupling = Coupling {
        n_c: row,
        c: DVector::zeros(row),
        blocks,
        pairs,
        groups,
    };

    let mut nlp = PartitionedNlp::new(subsystems, coupling)?;
    nlp.ocp_layout = Some(layouts);
    Ok(nlp)
}

fn ineq_count(spec: &OcpSpec, layout: &SubsystemLayout) -> usize {
    let mut n_h = 0;
    if spec.input_bounds[layout.index].is_some() {
        n_h += 2 * layout.n_u * layout.input_stages;
    }
    if spec.state_bounds[layout.index].is_some() {
        n_h += 2 * layout.n_x * (layout.horizon + 1);
    }
    n_h
}

/// One subsystem of an assembled OCP.
struct OcpSubsystem {
    model: Arc<dyn OcpModel>,
    layout: SubsystemLayout,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Terminal weight with both scalings applied.
    p_term: DMatrix<f64>,
    copy_penalty: f64,
    h_step: f64,
    input_bounds: Option<(DVector<f64>, DVector<f64>)>,
    state_bounds: Option<(DVector<f64>, DVector<f64>)>,
    x_now: DVector<f64>,
}

impl OcpSubsystem {
    fn objective_hessian(&self) -> DMatrix<f64> {
        let l = &self.layout;
        let mut h = DMatrix::zeros(l.dim, l.dim);
        for stage in 0..l.horizon {
            h.view_mut(
                (l.state_offset(stage), l.state_offset(stage)),
                (l.n_x, l.n_x),
            )
            .copy_from(&self.q);
        }
        h.view_mut(
            (l.state_offset(l.horizon), l.state_offset(l.horizon)),
            (l.n_x, l.n_x),
        )
        .copy_from(&self.p_term);
        for stage in 0..l.input_stages {
            h.view_mut(
                (l.input_offset(stage), l.input_offset(stage)),
                (l.n_u, l.n_u),
            )
            .copy_from(&self.r);
        }
        for col in l.copies_offset..l.dim {
            h[(col, col)] = self.copy_penalty;
        }
        h
    }

    fn gauss_newton(&self) -> GaussNewton {
        let hessian = self.objective_hessian();
        let factor = nalgebra::Cholesky::new(hessian.clone())
            .expect("objective Hessian is positive definite by construction")
            .l()
            .transpose();
        GaussNewton {
            offset: DVector::zeros(self.layout.dim),
            factor,
            hessian,
        }
    }

    fn stage_input(&self, z: &DVector<f64>, stage: usize) -> DVector<f64> {
        let l = &self.layout;
        z.rows(l.input_offset(stage), l.n_u).into_owned()
    }

    fn stage_state(&self, z: &DVector<f64>, stage: usize) -> DVector<f64> {
        let l = &self.layout;
        z.rows(l.state_offset(stage), l.n_x).into_owned()
    }

    fn stage_copies(&self, z: &DVector<f64>, stage: usize) -> Vec<DVector<f64>> {
        let l = &self.layout;
        l.copy_blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                z.rows(l.copy_offset(b, stage), blk.components.len())
                    .into_owned()
            })
            .collect()
    }

    /// Global columns of the dynamics arguments (x, u, copies) at one stage.
    fn stage_columns(&self, stage: usize) -> Vec<usize> {
        let l = &self.layout;
        let mut cols = Vec::new();
        cols.extend(l.state_offset(stage)..l.state_offset(stage) + l.n_x);
        cols.extend(l.input_offset(stage)..l.input_offset(stage) + l.n_u);
        for (b, blk) in l.copy_blocks.iter().enumerate() {
            cols.extend(l.copy_offset(b, stage)..l.copy_offset(b, stage) + blk.components.len());
        }
        cols
    }
}

impl SubsystemFunctions for OcpSubsystem {
    fn objective(&self, z: &DVector<f64>) -> f64 {
        let l = &self.layout;
        let mut val = 0.0;
        for stage in 0..l.horizon {
            let x = self.stage_state(z, stage);
            val += 0.5 * (&self.q * &x).dot(&x);
        }
        let xn = self.stage_state(z, l.horizon);
        val += 0.5 * (&self.p_term * &xn).dot(&xn);
        for stage in 0..l.input_stages {
            let u = self.stage_input(z, stage);
            val += 0.5 * (&self.r * &u).dot(&u);
        }
        for col in l.copies_offset..l.dim {
            val += 0.5 * self.copy_penalty * z[col] * z[col];
        }
        val
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = &self.layout;
        let mut g = DVector::zeros(l.dim);
        for stage in 0..l.horizon {
            let x = self.stage_state(z, stage);
            g.rows_mut(l.state_offset(stage), l.n_x)
                .copy_from(&(&self.q * &x));
        }
        let xn = self.stage_state(z, l.horizon);
        g.rows_mut(l.state_offset(l.horizon), l.n_x)
            .copy_from(&(&self.p_term * &xn));
        for stage in 0..l.input_stages {
            let u = self.stage_input(z, stage);
            g.rows_mut(l.input_offset(stage), l.n_u)
                .copy_from(&(&self.r * &u));
        }
        for col in l.copies_offset..l.dim {
            g[col] = self.copy_penalty * z[col];
        }
        g
    }

    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        nu: &DVector<f64>,
        _mu: &DVector<f64>,
    ) -> DMatrix<f64> {
        let l = &self.layout;
        let mut h = self.objective_hessian();
        for stage in 0..l.horizon {
            let w = nu.rows(stage * l.n_x, l.n_x).into_owned();
            if w.iter().all(|v| *v == 0.0) {
                continue;
            }
            let x = self.stage_state(z, stage);
            let u = self.stage_input(z, stage);
            let nb = self.stage_copies(z, stage);
            let block = self
                .model
                .step_weighted_hessian(l.index, &x, &u, &nb, self.h_step, &w);
            let cols = self.stage_columns(stage);
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate() {
                    h[(ca, cb)] += block[(a, b)];
                }
            }
        }
        h
    }

    fn eq(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = &self.layout;
        let mut g = DVector::zeros((l.horizon + 1) * l.n_x);
        for stage in 0..l.horizon {
            let x = self.stage_state(z, stage);
            let u = self.stage_input(z, stage);
            let nb = self.stage_copies(z, stage);
            let next = self.model.step(l.index, &x, &u, &nb, self.h_step);
            let residual = next - self.stage_state(z, stage + 1);
            g.rows_mut(stage * l.n_x, l.n_x).copy_from(&residual);
        }
        let pin = self.stage_state(z, 0) - &self.x_now;
        g.rows_mut(l.horizon * l.n_x, l.n_x).copy_from(&pin);
        g
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let l = &self.layout;
        let mut jac = DMatrix::zeros((l.horizon + 1) * l.n_x, l.dim);
        for stage in 0..l.horizon {
            let x = self.stage_state(z, stage);
            let u = self.stage_input(z, stage);
            let nb = self.stage_copies(z, stage);
            let step_jac = self.model.step_jacobian(l.index, &x, &u, &nb, self.h_step);
            let cols = self.stage_columns(stage);
            for r in 0..l.n_x {
                for (k, &col) in cols.iter().enumerate() {
                    jac[(stage * l.n_x + r, col)] = step_jac[(r, k)];
                }
                jac[(stage * l.n_x + r, l.state_offset(stage + 1) + r)] = -1.0;
            }
        }
        for r in 0..l.n_x {
            jac[(l.horizon * l.n_x + r, r)] = 1.0;
        }
        jac
    }

    fn ineq(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = &self.layout;
        let mut rows = Vec::new();
        if let Some((lo, hi)) = &self.input_bounds {
            for stage in 0..l.input_stages {
                let u = self.stage_input(z, stage);
                for c in 0..l.n_u {
                    rows.push(u[c] - hi[c]);
                    rows.push(lo[c] - u[c]);
                }
            }
        }
        if let Some((lo, hi)) = &self.state_bounds {
            for stage in 0..=l.horizon {
                let x = self.stage_state(z, stage);
                for c in 0..l.n_x {
                    rows.push(x[c] - hi[c]);
                    rows.push(lo[c] - x[c]);
                }
            }
        }
        DVector::from_vec(rows)
    }

    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        let l = &self.layout;
        let mut n_rows = 0;
        if self.input_bounds.is_some() {
            n_rows += 2 * l.n_u * l.input_stages;
        }
        if self.state_bounds.is_some() {
            n_rows += 2 * l.n_x * (l.horizon + 1);
        }
        let mut jac = DMatrix::zeros(n_rows, l.dim);
        let mut r = 0;
        if self.input_bounds.is_some() {
            for stage in 0..l.input_stages {
                for c in 0..l.n_u {
                    jac[(r, l.input_offset(stage) + c)] = 1.0;
                    jac[(r + 1, l.input_offset(stage) + c)] = -1.0;
                    r += 2;
                }
            }
        }
        if self.state_bounds.is_some() {
            for stage in 0..=l.horizon {
                for c in 0..l.n_x {
                    jac[(r, l.state_offset(stage) + c)] = 1.0;
                    jac[(r + 1, l.state_offset(stage) + c)] = -1.0;
                    r += 2;
                }
            }
        }
        jac
    }
}

// ---------------------------------------------------------------------------
// Derivative validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct DerivativeReport {
    pub gradient: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
    pub lagrangian_hessian: f64,
}

impl DerivativeReport {
    pub fn worst(&self) -> f64 {
        self.gradient
            .max(self.eq_jacobian)
            .max(self.ineq_jacobian)
            .max(self.lagrangian_hessian)
    }
}

/// Compares the analytic derivatives of every subsystem against central
/// finite differences at `z` and returns the worst relative error per block.
pub fn check_derivatives(nlp: &PartitionedNlp, z: &DVector<f64>) -> Vec<DerivativeReport> {
    let mut reports = Vec::with_capacity(nlp.subsystem_count());
    for i in 0..nlp.subsystem_count() {
        let z_i = nlp.z_slice(z, i);
        let sub = &nlp.subsystems[i];
        let f = &sub.functions;
        let dim = sub.dim;
        let mut report = DerivativeReport::default();

        let fd_step = |j: usize, zi: &DVector<f64>| 1e-6 * (1.0 + zi[j].abs());
        let rel = |diff: f64, scale: f64| diff / (1.0 + scale);

        // gradient
        let grad = f.gradient(&z_i);
        let mut worst = 0.0_f64;
        for j in 0..dim {
            let s = fd_step(j, &z_i);
            let mut zp = z_i.clone();
            let mut zm = z_i.clone();
            zp[j] += s;
            zm[j] -= s;
            let fd = (f.objective(&zp) - f.objective(&zm)) / (2.0 * s);
            worst = worst.max(rel((fd - grad[j]).abs(), grad[j].abs()));
        }
        report.gradient = worst;

        // equality jacobian
        if sub.eq_dim > 0 {
            let jac = f.eq_jacobian(&z_i);
            let mut worst = 0.0_f64;
            for j in 0..dim {
                let s = fd_step(j, &z_i);
                let mut zp = z_i.clone();
                let mut zm = z_i.clone();
                zp[j] += s;
                zm[j] -= s;
                let fd = (f.eq(&zp) - f.eq(&zm)) / (2.0 * s);
                for r in 0..sub.eq_dim {
                    worst = worst.max(rel((fd[r] - jac[(r, j)]).abs(), jac[(r, j)].abs()));
                }
            }
            report.eq_jacobian = worst;
        }

        // inequality jacobian
        if sub.ineq_dim > 0 {
            let jac = f.ineq_jacobian(&z_i);
            let mut worst = 0.0_f64;
            for j in 0..dim {
                let s = fd_step(j, &z_i);
                let mut zp = z_i.clone();
                let mut zm = z_i.clone();
                zp[j] += s;
                zm[j] -= s;
                let fd = (f.ineq(&zp) - f.ineq(&zm)) / (2.0 * s);
                for r in 0..sub.ineq_dim {
                    worst = worst.max(rel((fd[r] - jac[(r, j)]).abs(), jac[(r, j)].abs()));
                }
            }
            report.ineq_jacobian = worst;
        }

        // Lagrangian Hessian against finite differences of the analytic
        // Lagrangian gradient, with fixed deterministic multipliers
        let nu = DVector::from_fn(sub.eq_dim, |r, _| if r % 2 == 0 { 0.7 } else { -0.4 });
        let mu = DVector::from_fn(sub.ineq_dim, |r, _| 0.1 + 0.05 * r as f64);
        let grad_l = |zi: &DVector<f64>| {
            let mut g = f.gradient(zi);
            if sub.eq_dim > 0 {
                g += f.eq_jacobian(zi).transpose() * &nu;
            }
            if sub.ineq_dim > 0 {
                g += f.ineq_jacobian(zi).transpose() * &mu;
            }
            g
        };
        let hess = f.lagrangian_hessian(&z_i, &nu, &mu);
        let mut worst = 0.0_f64;
        for j in 0..dim {
            let s = fd_step(j, &z_i);
            let mut zp = z_i.clone();
            let mut zm = z_i.clone();
            zp[j] += s;
            zm[j] -= s;
            let fd = (grad_l(&zp) - grad_l(&zm)) / (2.0 * s);
            for r in 0..dim {
                worst = worst.max(rel((fd[r] - hess[(r, j)]).abs(), hess[(r, j)].abs()));
            }
        }
        report.lagrangian_hessian = worst;

        reports.push(report);
    }
    reports
}

// ---------------------------------------------------------------------------
// Generic quadratic subsystem, mainly for tests and small reference problems
// ---------------------------------------------------------------------------

/// `f(z) = 0.5 z'Hz + q'z`, linear equalities `Az = b`, linear inequalities
/// `Gz <= d`.
pub struct QuadraticSubsystem {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadraticSubsystem {
    pub fn into_problem(self, index: usize) -> SubsystemProblem {
        SubsystemProblem {
            index,
            dim: self.hess.nrows(),
            eq_dim: self.a_eq.nrows(),
            ineq_dim: self.a_in.nrows(),
            gauss_newton: None,
            functions: Box::new(self),
        }
    }
}

impl SubsystemFunctions for QuadraticSubsystem {
    fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.hess * z).dot(z) + self.lin.dot(z)
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.hess * z + &self.lin
    }
    fn lagrangian_hessian(
        &self,
        _z: &DVector<f64>,
        _nu: &DVector<f64>,
        _mu: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.hess.clone()
    }
    fn eq(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a_eq * z - &self.b_eq
    }
    fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.a_eq.clone()
    }
    fn ineq(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a_in * z - &self.b_in
    }
    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.a_in.clone()
    }
}

#[cfg(test)]
pub mod tests {
    use super::*;
    use crate::linalg::{seeded_rng, standard_normal};
    use crate::models::ScalarIntegratorPair;
    use crate::pendulum::{PendulumChainModel, PendulumChainParams};

    pub fn integrator_pair_spec() -> OcpSpec {
        let model = Arc::new(ScalarIntegratorPair);
        OcpSpec {
            model,
            horizon: 1,
            shooting_interval: 1.0,
            q_weights: vec![DMatrix::identity(1, 1); 2],
            r_weights: vec![DMatrix::identity(1, 1), DMatrix::zeros(0, 0)],
            terminal_weights: vec![DMatrix::identity(1, 1); 2],
            beta: 1.0,
            beta2: 1.0,
            input_bounds: vec![None, None],
            state_bounds: vec![None, None],
            copy_penalty: 1e-5,
            copy_span: CopySpan::DynamicsOnly,
            trailing_input: false,
        }
    }

    pub fn pendulum_spec(count: usize, horizon: usize, h: f64) -> OcpSpec {
        let params = PendulumChainParams::with_count(count);
        let bound = params.input_bound;
        let model = Arc::new(PendulumChainModel::new(params));
        OcpSpec {
            model,
            horizon,
            shooting_interval: h,
            q_weights: vec![
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-4, 10.0, 1e-4]));
                count
            ],
            r_weights: vec![DMatrix::from_element(1, 1, 0.001); count],
            terminal_weights: vec![DMatrix::identity(4, 4); count],
            beta: 1.0,
            beta2: 1.0,
            input_bounds: vec![
                Some((
                    DVector::from_element(1, -bound),
                    DVector::from_element(1, bound),
                ));
                count
            ],
            state_bounds: vec![None; count],
            copy_penalty: 1e-5,
            copy_span: CopySpan::FullHorizon,
            trailing_input: true,
        }
    }

    #[test]
    fn integrator_pair_matches_golden_layout() {
        let spec = integrator_pair_spec();
        let x0 = vec![DVector::from_vec(vec![0.5]), DVector::from_vec(vec![-0.25])];
        let nlp = assemble_nlp(&spec, &x0).unwrap();
        assert_eq!(nlp.n, 6);
        assert_eq!(nlp.n_c(), 1);
        let e = nlp.dense_coupling();
        let e1 = e.view((0, 0), (1, 3)).clone_owned();
        let e2 = e.view((0, 3), (1, 3)).clone_owned();
        assert_eq!(e1, DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));
        assert_eq!(e2, DMatrix::from_row_slice(1, 3, &[0.0, 0.0, -1.0]));
        assert_eq!(nlp.coupling.c, DVector::zeros(1));
        assert_eq!(nlp.in_neighbors[1], vec![0]);
        assert_eq!(nlp.out_neighbors[0], vec![1]);

        // residuals at a hand-built feasible point
        let mut z = DVector::zeros(6);
        z[0] = 0.5; // x1(0)
        z[2] = 0.25; // u1(0)
        z[1] = z[0] + z[2]; // x1(1)
        z[3] = -0.25; // x2(0)
        z[5] = 0.5; // copy of x1(0)
        z[4] = z[5] + z[3]; // x2(1)
        for i in 0..2 {
            let g = nlp.subsystems[i].functions.eq(&nlp.z_slice(&z, i));
            assert!(g.abs().max() < 1e-14, "subsystem {i} infeasible: {g}");
        }
        assert!(nlp.coupling.apply(&z, &nlp.z_offsets).abs().max() < 1e-14);
    }

    #[test]
    fn single_subsystem_has_no_coupling() {
        let params = PendulumChainParams::with_count(1);
        let spec = pendulum_spec(1, 3, 0.04);
        let _ = params;
        let nlp = assemble_nlp(&spec, &[DVector::zeros(4)]).unwrap();
        assert_eq!(nlp.n_c(), 0);
        assert!(nlp.coupling.pairs.is_empty());
        let l = &nlp.ocp_layout.as_ref().unwrap()[0];
        assert!(l.copy_blocks.is_empty());
    }

    #[test]
    fn chain_consensus_rows_match_pair_enumeration() {
        let (s, n) = (3usize, 2usize);
        let spec = pendulum_spec(s, n, 0.04);
        let x0 = vec![DVector::zeros(4); s];
        let nlp = assemble_nlp(&spec, &x0).unwrap();
        // one scalar coupled component per directed edge and stage 0..N
        assert_eq!(nlp.n_c(), 2 * (s - 1) * (n + 1));

        // independent enumeration of (original, copy) global index pairs
        let layouts = nlp.ocp_layout.as_ref().unwrap();
        let mut expected = std::collections::BTreeSet::new();
        for holder in 0..s {
            let mut nbs = Vec::new();
            if holder > 0 {
                nbs.push(holder - 1);
            }
            if holder + 1 < s {
                nbs.push(holder + 1);
            }
            for owner in nbs {
                for stage in 0..=n {
                    let orig = nlp.z_offsets[owner] + layouts[owner].state_offset(stage);
                    let block = layouts[holder]
                        .copy_blocks
                        .iter()
                        .position(|b| b.neighbor == owner)
                        .unwrap();
                    let copy = nlp.z_offsets[holder] + layouts[holder].copy_offset(block, stage);
                    expected.insert((orig, copy));
                }
            }
        }
        let actual: std::collections::BTreeSet<_> = nlp.coupling.pairs.iter().cloned().collect();
        assert_eq!(actual, expected);

        // each middle-subsystem original participates in two rows
        let mid_group = nlp.coupling.groups.iter().filter(|g| g.len() == 3).count();
        assert_eq!(
            mid_group,
            n + 1,
            "middle subsystem originals couple both ways"
        );
    }

    #[test]
    fn coupling_vanishes_when_copies_equal_originals() {
        let spec = pendulum_spec(4, 3, 0.04);
        let x0 = vec![DVector::zeros(4); 4];
        let nlp = assemble_nlp(&spec, &x0).unwrap();
        let mut rng = seeded_rng(2);
        let mut z = DVector::from_fn(nlp.n, |_, _| standard_normal(&mut rng));
        for &(orig, copy) in &nlp.coupling.pairs {
            z[copy] = z[orig];
        }
        assert!(nlp.coupling.apply(&z, &nlp.z_offsets).abs().max() == 0.0);
    }

    #[test]
    fn slice_concatenation_roundtrip() {
        let spec = pendulum_spec(3, 2, 0.04);
        let nlp = assemble_nlp(
            &spec,
            &[DVector::zeros(4), DVector::zeros(4), DVector::zeros(4)],
        )
        .unwrap();
        let mut rng = seeded_rng(9);
        let z = DVector::from_fn(nlp.n, |_, _| standard_normal(&mut rng));
        let mut rebuilt = DVector::zeros(nlp.n);
        for i in 0..nlp.subsystem_count() {
            rebuilt
                .rows_mut(nlp.z_offsets[i], nlp.subsystems[i].dim)
                .copy_from(&nlp.z_slice(&z, i));
        }
        assert_eq!(z, rebuilt);
    }

    #[test]
    fn quadratic_problem_derivatives_are_exact() {
        // linear dynamics and quadratic costs: finite differences agree to
        // rounding, far below the generic tolerance
        let spec = integrator_pair_spec();
        let x0 = vec![DVector::from_vec(vec![0.4]), DVector::from_vec(vec![-0.3])];
        let nlp = assemble_nlp(&spec, &x0).unwrap();
        let mut rng = seeded_rng(1);
        let z = DVector::from_fn(nlp.n, |_, _| standard_normal(&mut rng));
        for report in check_derivatives(&nlp, &z) {
            assert!(report.lagrangian_hessian <= 1e-9, "{report:?}");
            assert!(report.worst() <= 1e-9, "{report:?}");
        }
    }

    #[test]
    fn pendulum_derivatives_validate() {
        let spec = pendulum_spec(3, 2, 0.04);
        let x0 = vec![DVector::zeros(4); 3];
        let nlp = assemble_nlp(&spec, &x0).unwrap();
        let mut rng = seeded_rng(17);
        for _ in 0..20 {
            let z = DVector::from_fn(nlp.n, |_, _| 0.5 * standard_normal(&mut rng));
            for report in check_derivatives(&nlp, &z) {
                assert!(report.worst() < 1e-5, "derivative check failed: {report:?}");
            }
        }
    }

    #[test]
    fn kkt_residual_on_hand_solved_consensus_qp() {
        // two scalar subsystems, f1 = z1^2/2, f2 = (z2-4)^2/2, z1 = z2
        let sub = |lin: f64| QuadraticSubsystem {
            hess: DMatrix::identity(1, 1),
            lin: DVector::from_element(1, lin),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, 1),
            b_in: DVector::zeros(0),
        };
        let coupling = Coupling {
            n_c: 1,
            c: DVector::zeros(1),
            blocks: vec![vec![(0, 0, 1.0)], vec![(0, 0, -1.0)]],
            pairs: vec![(0, 1)],
            groups: vec![vec![0, 1]],
        };
        let nlp = PartitionedNlp::new(
            vec![sub(0.0).into_problem(0), sub(-4.0).into_problem(1)],
            coupling,
        )
        .unwrap();
        // solution: z = (2, 2), lambda = -2
        let star = PrimalDualPoint {
            z: DVector::from_vec(vec![2.0, 2.0]),
            nu: DVector::zeros(0),
            mu: DVector::zeros(0),
            lambda: DVector::from_vec(vec![-2.0]),
        };
        assert!(kkt_residual(&nlp, &star) < 1e-10);

        let mut perturbed = star.clone();
        perturbed.z[0] += 0.1;
        assert!(kkt_residual(&nlp, &perturbed) >= 0.1 - 1e-12);
    }

    #[test]
    fn rejects_duplicated_consensus_row() {
        let sub = || QuadraticSubsystem {
            hess: DMatrix::identity(1, 1),
            lin: DVector::zeros(1),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, 1),
            b_in: DVector::zeros(0),
        };
        let coupling = Coupling {
            n_c: 2,
            c: DVector::zeros(2),
            blocks: vec![
                vec![(0, 0, 1.0), (1, 0, 1.0)],
                vec![(0, 0, -1.0), (1, 0, -1.0)],
            ],
            pairs: vec![(0, 1), (0, 1)],
            groups: vec![vec![0, 1]],
        };
        let err = PartitionedNlp::new(vec![sub().into_problem(0), sub().into_problem(1)], coupling);
        assert!(matches!(err, Err(NlpError::RankDeficientCoupling)));
    }
}
