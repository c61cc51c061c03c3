//! Scalar integrator with an uncertain input gain, built from the public API.

use mismatch_mpc::closedloop::{constant_theta, run_closed_loop, Controller};
use mismatch_mpc::linalg::Mat;
use mismatch_mpc::model::ParametricSystem;
use mismatch_mpc::ocp::{BruteForceSolver, GradientSolver, InputBox, MpcProblem, OcpSolver};
use mismatch_mpc::terminal::{QuadraticCost, TerminalIngredients};

fn problem() -> MpcProblem {
    let sys = ParametricSystem::new("integrator", 1, 1, 1, |x, u, th| vec![x[0] + (1.0 + th[0]) * u[0]])
        .with_model_jacobian(|_, _| (Mat::diag(&[1.0]), Mat::diag(&[1.0])));
    let cost = QuadraticCost::new(Mat::diag(&[0.5]), Mat::diag(&[0.5])).unwrap();
    let term = TerminalIngredients::new(Mat::diag(&[0.5]), 0.5, |x| vec![-x[0]]).unwrap();
    MpcProblem::new(sys, 2, InputBox::symmetric(1, 1.0), cost, term).unwrap()
}

#[test]
fn gradient_solver_matches_closed_form_and_grid() {
    let prob = problem();
    let spg = GradientSolver::default();
    let brute = BruteForceSolver::new(401);
    for i in 0..=20 {
        let x = -1.6 + 0.16 * i as f64;
        let sol = spg.solve(&prob, &[x], None).unwrap();
        assert!(sol.feasible);
        // Unconstrained minimizer u = (−0.6x, −0.2x) stays inside the box here.
        assert!((sol.value - 0.8 * x * x).abs() < 1e-8, "x={x}: {}", sol.value);
        let b = brute.solve(&prob, &[x], None).unwrap();
        assert!(sol.value <= b.value + 1e-9);
    }
}

#[test]
fn nominal_loop_contracts_by_the_saturated_law() {
    let prob = problem();
    let spg = GradientSolver::default();
    let ctrl = Controller::new(&prob, &spg);
    let run = run_closed_loop(&ctrl, prob.system(), &[3.0], &constant_theta(&[0.0], 6), 100.0).unwrap();
    let expect = [3.0, 2.0, 1.0, 0.4, 0.16, 0.064, 0.0256];
    for (x, e) in run.states.iter().zip(expect) {
        assert!((x[0] - e).abs() < 1e-6, "{:?}", run.states);
    }
    assert!(run.delta_v.iter().all(|d| *d < 0.0));
}

#[test]
fn large_gain_error_prevents_convergence() {
    let prob = problem();
    let spg = GradientSolver::default();
    let ctrl = Controller::new(&prob, &spg);
    let run = run_closed_loop(&ctrl, prob.system(), &[3.0], &constant_theta(&[3.0], 40), 100.0).unwrap();
    let tail = run.states[20..].iter().map(|x| x[0].abs()).fold(f64::INFINITY, f64::min);
    assert!(tail > 0.1, "{:?}", run.states);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig { cases: 100, failure_persistence: None, ..Default::default() })]

    #[test]
    fn gradient_value_never_above_grid_search(x in -3.0..3.0f64) {
        let prob = problem();
        let sol = GradientSolver::default().solve(&prob, &[x], None).unwrap();
        let b = BruteForceSolver::new(401).solve(&prob, &[x], None).unwrap();
        proptest::prop_assert_eq!(sol.feasible, b.feasible);
        if b.feasible {
            proptest::prop_assert!(sol.value <= b.value + 1e-9, "x={} spg {} grid {}", x, sol.value, b.value);
        }
    }
}
