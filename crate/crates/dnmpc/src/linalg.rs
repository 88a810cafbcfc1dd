//! Small dense linear-algebra helpers shared across the solver stack.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample from the unit ball in `dim` dimensions.
pub fn random_in_unit_ball(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    let mut v = DVector::from_fn(dim, |_, _| standard_normal(rng));
    let norm = v.norm();
    if norm > 0.0 {
        let radius: f64 = rng.random::<f64>().powf(1.0 / dim.max(1) as f64);
        v *= radius / norm;
    }
    v
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Largest singular value of a dense matrix.
pub fn spectral_norm_dense(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Spectral radius (largest eigenvalue magnitude) of a dense square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_symmetric(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Orthonormal basis of the null space of `a`, via SVD.
///
/// Returns an `n x (n - rank)` matrix whose columns span `{x : a x = 0}`.
pub fn null_space_basis(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // pad to at least n rows: nalgebra's SVD is thin, and the full row basis
    // of V is needed to read off the null space
    let work = if a.nrows() < n {
        let mut padded = DMatrix::zeros(n, n);
        padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = work.svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.max();
    let tol = rank_tol * smax.max(1.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut z = DMatrix::zeros(n, n - rank);
    for (k, row) in (rank..v_t.nrows()).enumerate() {
        z.set_column(k, &v_t.row(row).transpose());
    }
    z
}

/// Whether `h` is positive definite on the null space of `a_eq`.
///
/// Checked by a Cholesky factorization of the reduced matrix `Z' h Z`.
pub fn posdef_on_null_space(h: &DMatrix<f64>, a_eq: &DMatrix<f64>) -> bool {
    let z = null_space_basis(a_eq, 1e-12);
    if z.ncols() == 0 {
        return true;
    }
    let reduced = z.transpose() * h * &z;
    nalgebra::Cholesky::new(reduced).is_some()
}

/// Abstract linear operator with an adjoint, for matrix-free norm estimation.
pub trait LinearOp {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64>;
}

pub struct DenseOp<'a>(pub &'a DMatrix<f64>);

impl LinearOp for DenseOp<'_> {
    fn rows(&self) -> usize {
        self.0.nrows()
    }
    fn cols(&self) -> usize {
        self.0.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0 * x
    }
    fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        self.0.transpose() * y
    }
}

/// Largest singular value of a linear operator, by Lanczos iteration on `A'A`.
///
/// Uses full reorthogonalization; intended for the mid-size operators that
/// appear in the certificate computations, where forming the dense matrix or
/// running a full SVD would dominate the runtime.
pub fn spectral_norm_op(op: &dyn LinearOp, max_iter: usize, tol: f64, seed: u64) -> f64 {
    let n = op.cols();
    if n == 0 || op.rows() == 0 {
        return 0.0;
    }
    let mut rng = seeded_rng(seed);
    let mut v = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;

    let mut basis: Vec<DVector<f64>> = vec![v.clone()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut prev_estimate = 0.0_f64;

    for j in 0..max_iter.min(n) {
        let mut w = op.apply_transpose(&op.apply(&basis[j]));
        let alpha = basis[j].dot(&w);
        alphas.push(alpha);
        w -= &basis[j] * alpha;
        if j > 0 {
            w -= &basis[j - 1] * betas[j - 1];
        }
        // full reorthogonalization keeps the Krylov basis numerically orthogonal
        for b in &basis {
            let proj = b.dot(&w);
            w -= b * proj;
        }
        let beta = w.norm();

        let estimate = tridiag_max_eig(&alphas, &betas);
        let converged = (estimate - prev_estimate).abs() <= tol * estimate.max(1e-30);
        prev_estimate = estimate;
        if beta <= 1e-14 * estimate.max(1.0) || (j > 8 && converged) {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    prev_estimate.max(0.0).sqrt()
}

fn tridiag_max_eig(alphas: &[f64], betas: &[f64]) -> f64 {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    t.symmetric_eigen().eigenvalues.max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lanczos_matches_dense_svd() {
        let mut rng = seeded_rng(7);
        for trial in 0..5 {
            let (r, c) = (30 + trial, 24 + 2 * trial);
            let m = DMatrix::from_fn(r, c, |_, _| standard_normal(&mut rng));
            let dense = spectral_norm_dense(&m);
            let op = DenseOp(&m);
            let lanczos = spectral_norm_op(&op, 200, 1e-12, 42);
            assert!(
                (dense - lanczos).abs() <= 1e-8 * dense,
                "trial {trial}: dense {dense} vs lanczos {lanczos}"
            );
        }
    }

    #[test]
    fn null_space_annihilates() {
        let mut rng = seeded_rng(3);
        let a = DMatrix::from_fn(4, 9, |_, _| standard_normal(&mut rng));
        let z = null_space_basis(&a, 1e-12);
        assert_eq!(z.ncols(), 5);
        assert!((&a * &z).norm() < 1e-12);
        let gram = z.transpose() * &z;
        assert!((gram - DMatrix::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn reduced_posdef_detects_sign() {
        // indefinite overall, positive definite on the constraint null space
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -5.0]));
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!(posdef_on_null_space(&h, &a));
        let a_bad = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(!posdef_on_null_space(&h, &a_bad));
    }
}
