//! Invariant checks over the built-in scenarios, shared by the property
//! tests below and the acceptance run.

use std::fs;
use std::path::Path;

use mismatch_mpc::closedloop::{cost_difference_field, random_theta, run_closed_loop, Controller};
use mismatch_mpc::ocp::{InputBox, InputSequence};
use mismatch_mpc_cli::commands;
use mismatch_mpc_cli::config::ExperimentConfig;
use mismatch_mpc_cli::scenario::{Scenario, ScenarioRegistry};

pub type Check = Result<(), String>;

pub fn load(name: &str) -> Scenario {
    ScenarioRegistry::default().load(name).expect("built-in scenario loads")
}

/// Scenarios whose terminal ingredients satisfy the terminal descent
/// condition, where the shifted warm start must decrease the cost.
pub fn descent_scenarios() -> Vec<Scenario> {
    ["signed-sqrt", "sin", "pendulum"].iter().map(|n| load(n)).filter(|s| s.terminal_descent).collect()
}

/// `V_N(f̂(x,κ_N(x)), ũ) ≤ V_N⁰(x) − ℓ(x,κ_N(x)) + 1e-8` whenever the OCP at
/// `x` is feasible.
pub fn warm_start_descent(sc: &Scenario, x: &[f64]) -> Check {
    let solver = sc.solver(None).map_err(|e| e.to_string())?;
    let prob = &sc.problem;
    let sol = solver.solve(prob, x, None).map_err(|e| e.to_string())?;
    if !sol.feasible {
        return Ok(());
    }
    let warm = prob.warm_start(&sol).map_err(|e| e.to_string())?;
    let u = sol.first_input();
    let next = prob.system().model_step(x, u).map_err(|e| e.to_string())?;
    if !prob.feasible(&next, &warm) {
        return Err(format!("{}: warm start infeasible at x = {x:?}", sc.name));
    }
    let lhs = prob.objective(&next, &warm).map_err(|e| e.to_string())?.value;
    let rhs = sol.value - prob.cost().eval(x, u) + 1e-8;
    if lhs <= rhs {
        Ok(())
    } else {
        Err(format!("{}: V(f̂, ũ) = {lhs} > {rhs} at x = {x:?}", sc.name))
    }
}

/// Projecting a sequence already inside the box changes nothing, and a
/// second projection of any sequence changes nothing either.
pub fn projection_idempotent(b: &InputBox, raw: &[Vec<f64>]) -> Check {
    let once = InputSequence(raw.to_vec()).projected(b);
    let twice = once.projected(b);
    if once != twice {
        return Err(format!("projection not idempotent on {raw:?}"));
    }
    if !once.0.iter().all(|u| b.contains(u, 0.0)) {
        return Err(format!("projection left the box on {raw:?}"));
    }
    Ok(())
}

/// `ΔV(0,θ) = 0` for a steady state that survives the mismatch.
pub fn dv_zero_at_origin(sc: &Scenario, theta: &[f64]) -> Check {
    let solver = sc.solver(None).map_err(|e| e.to_string())?;
    let ctrl = Controller::new(&sc.problem, solver.as_ref());
    let zero = vec![0.0; sc.problem.n()];
    let field = cost_difference_field(&ctrl, sc.plant(), &[zero], &[theta.to_vec()]).map_err(|e| e.to_string())?;
    let dv = field.dv[0][0];
    if dv == 0.0 {
        Ok(())
    } else {
        Err(format!("{}: ΔV(0, {theta:?}) = {dv}", sc.name))
    }
}

fn read_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Two `simulate` runs of the same config and seed write identical CSVs.
pub fn csv_deterministic(scenario: &str, seed: u64) -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outputs: Vec<Vec<(String, Vec<u8>)>> = dirs
        .iter()
        .map(|d| {
            let cfg = ExperimentConfig {
                scenario: Some(scenario.into()),
                random_runs: Some(2),
                k_max: Some(20),
                seed: Some(seed),
                out: Some(d.path().to_path_buf()),
                ..Default::default()
            };
            let exp = cfg.resolve(&ScenarioRegistry::default()).map_err(|e| e.to_string())?;
            commands::simulate(&exp).map_err(|e| e.to_string())?;
            Ok(read_csvs(d.path()))
        })
        .collect::<Result<_, String>>()?;
    if outputs[0].is_empty() {
        return Err("no CSV written".into());
    }
    if outputs[0] == outputs[1] {
        Ok(())
    } else {
        Err(format!("{scenario}: CSV output differs between runs with seed {seed}"))
    }
}

/// A run under a random `θ` sequence inside the certified radius keeps the
/// scenario's Lyapunov function nonincreasing (within `1e-8`) and drives it
/// below `1e-6`.
pub fn random_sequence_descends(sc: &Scenario, x0: &[f64], delta: f64, steps: usize, seed: u64) -> Check {
    let solver = sc.solver(None).map_err(|e| e.to_string())?;
    let ctrl = Controller::new(&sc.problem, solver.as_ref());
    let seq = random_theta(&sc.theta_space, delta, steps, seed);
    let run = run_closed_loop(&ctrl, sc.plant(), x0, &seq, sc.escape_radius()).map_err(|e| e.to_string())?;
    if run.escaped {
        return Err(format!("{}: run from {x0:?} escaped (seed {seed})", sc.name));
    }
    let v: Vec<f64> = run.states.iter().map(|x| sc.lyapunov.eval(&ctrl, x)).collect();
    if let Some(k) = v.windows(2).position(|w| w[1] > w[0] + 1e-8) {
        return Err(format!("{}: V rose from {} to {} at step {k} (seed {seed})", sc.name, v[k], v[k + 1]));
    }
    let v_end = *v.last().unwrap();
    if v_end < 1e-6 {
        Ok(())
    } else {
        Err(format!("{}: V = {v_end} after {steps} steps from {x0:?} (seed {seed})", sc.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn shifted_warm_start_descends_sqrt(x in -2.0..2.0f64) {
            let sc = load("signed-sqrt");
            warm_start_descent(&sc, &[x]).map_err(TestCaseError::fail)?;
        }

        #[test]
        fn shifted_warm_start_descends_sin(x in -2.0..2.0f64) {
            let sc = load("sin");
            warm_start_descent(&sc, &[x]).map_err(TestCaseError::fail)?;
        }

        #[test]
        fn projection_is_idempotent(raw in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..8)) {
            let b = InputBox::new(vec![-1.0, -0.5], vec![1.0, 2.0]).unwrap();
            projection_idempotent(&b, &raw).map_err(TestCaseError::fail)?;
        }

        #[test]
        fn cost_difference_vanishes_at_origin(t in -3.0..3.0f64) {
            for name in ["integrator", "signed-sqrt", "sin"] {
                let sc = load(name);
                dv_zero_at_origin(&sc, &[t]).map_err(TestCaseError::fail)?;
            }
        }

        #[test]
        fn random_sequences_descend_on_sin(x0 in -2.0..2.0f64, seed in any::<u64>()) {
            let sc = load("sin");
            random_sequence_descends(&sc, &[x0], 0.5, 200, seed).map_err(TestCaseError::fail)?;
        }

        #[test]
        fn run_matches_field(x0 in -2.0..2.0f64, seed in 0u64..1000) {
            let sc = load("sin");
            let solver = sc.solver(None).unwrap();
            let ctrl = Controller::new(&sc.problem, solver.as_ref());
            let seq = random_theta(&sc.theta_space, 0.5, 10, seed);
            let run = run_closed_loop(&ctrl, sc.plant(), &[x0], &seq, sc.escape_radius()).unwrap();
            for (k, dv) in run.delta_v.iter().enumerate() {
                let f = cost_difference_field(&ctrl, sc.plant(), &run.states[k..=k], &run.theta_seq[k..=k]).unwrap();
                prop_assert!((f.dv[0][0] - dv).abs() <= 1e-9, "k={} field {} run {}", k, f.dv[0][0], dv);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn csv_output_is_deterministic(seed in any::<u64>()) {
            csv_deterministic("integrator", seed).map_err(TestCaseError::fail)?;
        }
    }
}
