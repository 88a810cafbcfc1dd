//! Factorizations of equality-constrained saddle systems
//! `[[H, A'],[A, 0]] [x; nu] = [r1; r2]`.
//!
//! The dense variant handles generic problems. The block variant exploits the
//! partially separable structure of stacked subsystem problems coupled only
//! through consensus rows: per-subsystem factorizations plus a Schur
//! complement on the coupling multipliers. Both present the same interface so
//! the active-set solver can run on either.

use crate::nlp::Coupling;
use nalgebra::{DMatrix, DVector};

pub trait BaseKkt {
    /// Primal dimension.
    fn n(&self) -> usize;
    /// Number of equality rows.
    fn m(&self) -> usize;
    /// Solves the saddle system; `None` if the factorization broke down.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)>;
    /// Applies the system: returns `(H x + A' nu, A x)`.
    fn multiply(&self, x: &DVector<f64>, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

fn lu_usable(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, dim: usize) -> bool {
    if dim == 0 {
        return true;
    }
    let u = lu.u();
    let mut dmax = 0.0_f64;
    let mut dmin = f64::INFINITY;
    for i in 0..dim {
        let d = u[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    dmin > 1e-13 * dmax.max(1.0)
}

pub struct DenseBaseKkt {
    n: usize,
    m: usize,
    k: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseBaseKkt {
    pub fn factor(h: &DMatrix<f64>, a_eq: &DMatrix<f64>) -> Option<Self> {
        let n = h.nrows();
        let m = a_eq.nrows();
        assert_eq!(h.ncols(), n, "Hessian must be square");
        if m > 0 {
            assert_eq!(a_eq.ncols(), n, "equality Jacobian width mismatch");
        }
        let dim = n + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(h);
        if m > 0 {
            k.view_mut((0, n), (n, m)).copy_from(&a_eq.transpose());
            k.view_mut((n, 0), (m, n)).copy_from(a_eq);
        }
        let lu = k.clone().lu();
        lu_usable(&lu, dim).then_some(Self { n, m, k, lu })
    }
}

impl BaseKkt for DenseBaseKkt {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut rhs = DVector::zeros(self.n + self.m);
        rhs.rows_mut(0, self.n).copy_from(r1);
        rhs.rows_mut(self.n, self.m).copy_from(r2);
        let sol = self.lu.solve(&rhs)?;
        Some((
            sol.rows(0, self.n).into_owned(),
            sol.rows(self.n, self.m).into_owned(),
        ))
    }
    fn multiply(&self, x: &DVector<f64>, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut v = DVector::zeros(self.n + self.m);
        v.rows_mut(0, self.n).copy_from(x);
        v.rows_mut(self.n, self.m).copy_from(nu);
        let out = &self.k * v;
        (
            out.rows(0, self.n).into_owned(),
            out.rows(self.n, self.m).into_owned(),
        )
    }
}

struct SubBlock {
    n_i: usize,
    m_i: usize,
    k: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// Consensus rows this subsystem participates in, ascending.
    rows: Vec<usize>,
    /// `K_i^{-1} [E_i' ; 0]`, one column per entry of `rows`.
    x_cols: DMatrix<f64>,
}

/// Saddle solver for block-diagonal `(H, J_g)` plus consensus rows `E`:
/// the equality block is `[diag(J_g); E]` and the multipliers come back
/// ordered as `(nu_1, .., nu_S, lambda)`.
pub struct BlockBaseKkt {
    subs: Vec<SubBlock>,
    z_offsets: Vec<usize>,
    g_offsets: Vec<usize>,
    n: usize,
    n_g: usize,
    n_c: usize,
    e_blocks: Vec<Vec<(usize, usize, f64)>>,
    schur_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl BlockBaseKkt {
    pub fn factor(
        h_blocks: &[DMatrix<f64>],
        jg_blocks: &[DMatrix<f64>],
        coupling: &Coupling,
    ) -> Option<Self> {
        let s = h_blocks.len();
        assert_eq!(jg_blocks.len(), s);
        assert_eq!(coupling.blocks.len(), s);
        let mut subs = Vec::with_capacity(s);
        let mut z_offsets = Vec::with_capacity(s);
        let mut g_offsets = Vec::with_capacity(s);
        let (mut n, mut n_g) = (0usize, 0usize);
        let n_c = coupling.n_c;

        for i in 0..s {
            let n_i = h_blocks[i].nrows();
            let m_i = jg_blocks[i].nrows();
            z_offsets.push(n);
            g_offsets.push(n_g);
            n += n_i;
            n_g += m_i;

            let dim = n_i + m_i;
            let mut k = DMatrix::zeros(dim, dim);
            k.view_mut((0, 0), (n_i, n_i)).copy_from(&h_blocks[i]);
            if m_i > 0 {
                k.view_mut((0, n_i), (n_i, m_i))
                    .copy_from(&jg_blocks[i].transpose());
                k.view_mut((n_i, 0), (m_i, n_i)).copy_from(&jg_blocks[i]);
            }
            let lu = k.clone().lu();
            if !lu_usable(&lu, dim) {
                return None;
            }

            let mut rows: Vec<usize> = coupling.blocks[i].iter().map(|t| t.0).collect();
            rows.sort_unstable();
            rows.dedup();
            let mut rhs = DMatrix::zeros(dim, rows.len());
            for &(row, col, val) in &coupling.blocks[i] {
                let k_idx = rows.binary_search(&row).unwrap();
                rhs[(col, k_idx)] = val;
            }
            let x_cols = if rows.is_empty() {
                DMatrix::zeros(dim, 0)
            } else {
                lu.solve(&rhs)?
            };
            subs.push(SubBlock {
                n_i,
                m_i,
                k,
                lu,
                rows,
                x_cols,
            });
        }

        let schur_lu = if n_c > 0 {
            let mut schur = DMatrix::zeros(n_c, n_c);
            for i in 0..s {
                let sub = &subs[i];
                for &(row, col, val) in &coupling.blocks[i] {
                    for (k_idx, &row2) in sub.rows.iter().enumerate() {
                        schur[(row, row2)] += val * sub.x_cols[(col, k_idx)];
                    }
                }
            }
            let lu = schur.lu();
            if !lu_usable(&lu, n_c) {
                return None;
            }
            Some(lu)
        } else {
            None
        };

        Some(Self {
            subs,
            z_offsets,
            g_offsets,
            n,
            n_g,
            n_c,
            e_blocks: coupling.blocks.clone(),
            schur_lu,
        })
    }
}

impl BaseKkt for BlockBaseKkt {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.n_g + self.n_c
    }
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let s = self.subs.len();
        // forward: per-subsystem solves
        let mut t: Vec<DVector<f64>> = Vec::with_capacity(s);
        for i in 0..s {
            let sub = &self.subs[i];
            let mut rhs = DVector::zeros(sub.n_i + sub.m_i);
            rhs.rows_mut(0, sub.n_i)
                .copy_from(&r1.rows(self.z_offsets[i], sub.n_i));
            rhs.rows_mut(sub.n_i, sub.m_i)
                .copy_from(&r2.rows(self.g_offsets[i], sub.m_i));
            t.push(sub.lu.solve(&rhs)?);
        }

        let lambda = if self.n_c > 0 {
            let mut rhs_l = -r2.rows(self.n_g, self.n_c).into_owned();
            for i in 0..s {
                for &(row, col, val) in &self.e_blocks[i] {
                    rhs_l[row] += val * t[i][col];
                }
            }
            self.schur_lu.as_ref().unwrap().solve(&rhs_l)?
        } else {
            DVector::zeros(0)
        };

        let mut x = DVector::zeros(self.n);
        let mut mults = DVector::zeros(self.n_g + self.n_c);
        for i in 0..s {
            let sub = &self.subs[i];
            let mut sol = t[i].clone();
            for (k_idx, &row) in sub.rows.iter().enumerate() {
                let l = lambda[row];
                if l != 0.0 {
                    sol -= sub.x_cols.column(k_idx) * l;
                }
            }
            x.rows_mut(self.z_offsets[i], sub.n_i)
                .copy_from(&sol.rows(0, sub.n_i));
            mults
                .rows_mut(self.g_offsets[i], sub.m_i)
                .copy_from(&sol.rows(sub.n_i, sub.m_i));
        }
        mults.rows_mut(self.n_g, self.n_c).copy_from(&lambda);
        Some((x, mults))
    }

    fn multiply(&self, x: &DVector<f64>, nu: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let s = self.subs.len();
        let mut top = DVector::zeros(self.n);
        let mut bottom = DVector::zeros(self.n_g + self.n_c);
        let lambda = nu.rows(self.n_g, self.n_c);
        for i in 0..s {
            let sub = &self.subs[i];
            let mut v = DVector::zeros(sub.n_i + sub.m_i);
            v.rows_mut(0, sub.n_i)
                .copy_from(&x.rows(self.z_offsets[i], sub.n_i));
            v.rows_mut(sub.n_i, sub.m_i)
                .copy_from(&nu.rows(self.g_offsets[i], sub.m_i));
            let out = &sub.k * v;
            top.rows_mut(self.z_offsets[i], sub.n_i)
                .copy_from(&out.rows(0, sub.n_i));
            bottom
                .rows_mut(self.g_offsets[i], sub.m_i)
                .copy_from(&out.rows(sub.n_i, sub.m_i));
            for &(row, col, val) in &self.e_blocks[i] {
                top[self.z_offsets[i] + col] += val * lambda[row];
                bottom[self.n_g + row] += val * x[self.z_offsets[i] + col];
            }
        }
        (top, bottom)
    }
}
