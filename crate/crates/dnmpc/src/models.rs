//! Subsystem dynamics models used to build coupled optimal control problems.
//!
//! A model describes a network of subsystems whose discrete dynamics may
//! depend on selected state components of in-neighbors. Couplings are held
//! constant over one shooting step, which keeps the per-subsystem dynamics
//! functions of local decision variables only.

use nalgebra::{DMatrix, DVector};

pub trait OcpModel: Send + Sync {
    fn subsystem_count(&self) -> usize;
    fn state_dim(&self, i: usize) -> usize;
    fn input_dim(&self, i: usize) -> usize;

    /// In-neighbors of subsystem `i`, sorted ascending.
    fn in_neighbors(&self, i: usize) -> Vec<usize>;

    /// Components of subsystem `owner`'s state that enter its out-neighbors'
    /// dynamics (and are therefore copied by them).
    fn coupled_components(&self, owner: usize) -> Vec<usize>;

    /// One shooting step of subsystem `i` with couplings frozen.
    ///
    /// `nb` holds, per in-neighbor in ascending order, the coupled components
    /// of that neighbor's state.
    fn step(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nb: &[DVector<f64>],
        h: f64,
    ) -> DVector<f64>;

    /// Jacobian of `step` with columns ordered as (x, u, nb blocks ascending).
    fn step_jacobian(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nb: &[DVector<f64>],
        h: f64,
    ) -> DMatrix<f64>;

    /// Weighted sum `sum_s w[s] * d2 step_s / d(x,u,nb)^2`, same column order
    /// as `step_jacobian`. Zero for models with linear dynamics.
    fn step_weighted_hessian(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nb: &[DVector<f64>],
        h: f64,
        w: &DVector<f64>,
    ) -> DMatrix<f64>;

    /// Continuous-time right-hand side of the fully coupled network, for
    /// plant simulation. Models without a continuous plant may leave this
    /// unimplemented.
    fn plant_rhs(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        unimplemented!("model has no continuous-time plant")
    }

    /// One plant step over a control interval. Defaults to a single
    /// Runge-Kutta step of the coupled continuous dynamics; discrete-native
    /// models override it with their exact map.
    fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
        crate::pendulum::rk4_autonomous(|xx| self.plant_rhs(xx, u), x, h)
    }

    fn total_state_dim(&self) -> usize {
        (0..self.subsystem_count()).map(|i| self.state_dim(i)).sum()
    }
    fn total_input_dim(&self) -> usize {
        (0..self.subsystem_count()).map(|i| self.input_dim(i)).sum()
    }

    fn out_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for j in 0..self.subsystem_count() {
            if j != i && self.in_neighbors(j).contains(&i) {
                out.push(j);
            }
        }
        out
    }
}

/// Two scalar subsystems where the second integrates the first's state:
/// `x1+ = x1 + u1`, `x2+ = x1 + x2`. The smallest coupled network with a
/// single copied variable; used as a golden case for the NLP reformulation.
pub struct ScalarIntegratorPair;

impl OcpModel for ScalarIntegratorPair {
    fn subsystem_count(&self) -> usize {
        2
    }
    fn state_dim(&self, _i: usize) -> usize {
        1
    }
    fn input_dim(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            0
        }
    }
    fn in_neighbors(&self, i: usize) -> Vec<usize> {
        if i == 1 {
            vec![0]
        } else {
            vec![]
        }
    }
    fn coupled_components(&self, _owner: usize) -> Vec<usize> {
        vec![0]
    }
    fn step(
        &self,
        i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        nb: &[DVector<f64>],
        _h: f64,
    ) -> DVector<f64> {
        match i {
            0 => DVector::from_vec(vec![x[0] + u[0]]),
            _ => DVector::from_vec(vec![nb[0][0] + x[0]]),
        }
    }
    fn step_jacobian(
        &self,
        i: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _nb: &[DVector<f64>],
        _h: f64,
    ) -> DMatrix<f64> {
        match i {
            0 => DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            _ => DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        }
    }
    fn step_weighted_hessian(
        &self,
        _i: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _nb: &[DVector<f64>],
        _h: f64,
        _w: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>, _h: f64) -> DVector<f64> {
        // exact synchronous update of the discrete pair
        DVector::from_vec(vec![x[0] + u[0], x[0] + x[1]])
    }
}

/// Chain of identical discrete-time double integrators without coupling.
/// Linear and unconstrained-friendly; used for closed-form solver checks.
pub struct DoubleIntegratorChain {
    pub count: usize,
}

impl OcpModel for DoubleIntegratorChain {
    fn subsystem_count(&self) -> usize {
        self.count
    }
    fn state_dim(&self, _i: usize) -> usize {
        2
    }
    fn input_dim(&self, _i: usize) -> usize {
        1
    }
    fn in_neighbors(&self, _i: usize) -> Vec<usize> {
        vec![]
    }
    fn coupled_components(&self, _owner: usize) -> Vec<usize> {
        vec![]
    }
    fn step(
        &self,
        _i: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _nb: &[DVector<f64>],
        h: f64,
    ) -> DVector<f64> {
        DVector::from_vec(vec![x[0] + h * x[1] + 0.5 * h * h * u[0], x[1] + h * u[0]])
    }
    fn step_jacobian(
        &self,
        _i: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _nb: &[DVector<f64>],
        h: f64,
    ) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, h, 0.5 * h * h, 0.0, 1.0, h])
    }
    fn step_weighted_hessian(
        &self,
        _i: usize,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _nb: &[DVector<f64>],
        _h: f64,
        _w: &DVector<f64>,
    ) -> DMatrix<f64> {
        DMatrix::zeros(3, 3)
    }
    fn plant_rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut dx = DVector::zeros(2 * self.count);
        for i in 0..self.count {
            dx[2 * i] = x[2 * i + 1];
            dx[2 * i + 1] = u[i];
        }
        dx
    }
}
