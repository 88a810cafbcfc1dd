//! Stability-constant fitting against closed forms on a linear-quadratic
//! problem: with the Riccati terminal weight, the finite-horizon value
//! function equals the infinite-horizon quadratic exactly, so the fitted
//! envelope must recover the eigenvalue bounds of the cost-to-go matrix.

use dnmpc::cert::{fit_rti_inputs, rti_constant_chain, FitBudget, RtiFitProblem, RtiParams};
use dnmpc::dsqp::solve_to_kkt;
use dnmpc::models::{DoubleIntegratorChain, OcpModel};
use dnmpc::mpc::{cold_start_point, extract_input};
use dnmpc::nlp::{assemble_nlp, CopySpan, OcpSpec};
use dnmpc::pendulum::riccati_design;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

fn lqr_spec() -> (OcpSpec, DMatrix<f64>) {
    let h = 0.1;
    let model = Arc::new(DoubleIntegratorChain { count: 1 });
    let a = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.5 * h * h, h]);
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
    let r = DMatrix::from_element(1, 1, 0.2);
    let (p, _k) = riccati_design(&a, &b, &q, &r).unwrap();
    let spec = OcpSpec {
        model,
        horizon: 5,
        shooting_interval: h,
        q_weights: vec![q],
        r_weights: vec![r],
        terminal_weights: vec![p.clone()],
        beta: 1.0,
        beta2: 1.0,
        input_bounds: vec![None],
        state_bounds: vec![None],
        copy_penalty: 1e-5,
        copy_span: CopySpan::DynamicsOnly,
        trailing_input: false,
    };
    (spec, p)
}

fn value_at(spec: &OcpSpec, x: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let nlp = assemble_nlp(spec, &[x.clone()]).unwrap();
    let cold = cold_start_point(&nlp, &[x.clone()]);
    let (p_star, _) = solve_to_kkt(&nlp, &cold, 1e-11, 50).unwrap();
    let value = nlp.objective(&p_star.z);
    let u = extract_input(&nlp, &p_star.z);
    let mut flat = p_star.z.clone();
    let extra = DVector::zeros(0);
    flat.extend(extra.iter().cloned());
    (value, u, flat)
}

#[test]
fn lqr_value_function_envelope_is_exact() {
    let (spec, p) = lqr_spec();
    // the optimal value equals the quadratic cost-to-go everywhere
    let probes = [
        DVector::from_vec(vec![0.7, -0.3]),
        DVector::from_vec(vec![-0.2, 0.9]),
        DVector::from_vec(vec![0.05, 0.02]),
    ];
    for x in &probes {
        let (v, _, _) = value_at(&spec, x);
        let expected = 0.5 * (&p * x).dot(x);
        assert!(
            (v - expected).abs() <= 1e-6 * (1.0 + expected),
            "value {v} vs quadratic {expected}"
        );
    }

    // the envelope is tight along the eigenvectors of the cost-to-go matrix
    let eig = p.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut ratios = Vec::new();
    for k in 0..2 {
        let v = eig.eigenvectors.column(k).into_owned() * 0.3;
        let (val, _, _) = value_at(&spec, &v);
        let ratio = val / v.norm_squared();
        ratios.push(ratio);
        lo = lo.min(eig.eigenvalues[k]);
        hi = hi.max(eig.eigenvalues[k]);
    }
    let fit_err = (ratios.iter().cloned().fold(f64::INFINITY, f64::min) - lo / 2.0)
        .abs()
        .max((ratios.iter().cloned().fold(0.0, f64::max) - hi / 2.0).abs());
    assert!(fit_err <= 1e-6, "envelope fit error {fit_err}");
}

#[test]
fn fitted_constants_feed_a_conclusive_chain() {
    let (spec, p) = lqr_spec();
    let model = spec.model.clone();
    let solve = |x: &DVector<f64>| value_at(&spec, x);
    let plant_step = |x: &DVector<f64>, u: &DVector<f64>| {
        dnmpc::pendulum::rk4_autonomous(|xx| model.plant_rhs(xx, u), x, 0.1)
    };
    let continuous_rhs = |x: &DVector<f64>, u: &DVector<f64>| model.plant_rhs(x, u);
    let problem = RtiFitProblem {
        state_dim: 2,
        solve: &solve,
        plant_step: &plant_step,
        continuous_rhs: &continuous_rhs,
        delta: 0.1,
    };
    let inputs = fit_rti_inputs(
        &problem,
        &FitBudget {
            samples: 48,
            radius: 0.4,
            seed: 3,
        },
    )
    .unwrap();

    // sampled envelope lies inside the eigenvalue bounds of the cost-to-go
    let eig = p.symmetric_eigen();
    let lo = eig.eigenvalues.min() / 2.0;
    let hi = eig.eigenvalues.max() / 2.0;
    assert!(inputs.a1 >= lo - 1e-9 && inputs.a1 <= hi);
    assert!(inputs.a2 <= hi + 1e-9 && inputs.a2 >= lo);
    assert!(inputs.a3 > 0.0);

    let constants = rti_constant_chain(
        &inputs,
        &RtiParams {
            delta: 0.1,
            delta1: None,
            v_bar: 0.5,
            r_p: 0.05,
            r_x: 0.05,
            a_p: 0.05,
        },
    )
    .unwrap();
    assert!(constants.conclusive, "chain inconclusive: {constants:?}");
    assert!(constants.delta_bar > 0.0);
    assert!(constants.kappa < 1.0);
}
