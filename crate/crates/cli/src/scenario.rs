//! The four built-in scenarios, registered by name.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use mismatch_mpc::closedloop::{Lyapunov, StateBox, ThetaSpace};
use mismatch_mpc::compfn::{JointComparisonFn, ScalarComparisonFn};
use mismatch_mpc::linalg::{stacked_norm, Mat};
use mismatch_mpc::model::{blended_discretization, Discretization, OdeSystem, ParametricSystem};
use mismatch_mpc::ocp::{
    AnalyticLaw, AnalyticSolver, InputBox, InputSequence, MpcProblem, OcpSolver, SolverRegistry,
};
use mismatch_mpc::terminal::{
    pendulum_terminal_constants, verify_assumption3, QuadraticCost, TerminalIngredients,
    PENDULUM_DELTA, PENDULUM_GAIN,
};
use mismatch_mpc::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Default experiment settings of a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct Defaults {
    pub x0: Vec<Vec<f64>>,
    /// Full parameter vectors simulated by default.
    pub thetas: Vec<Vec<f64>>,
    pub rho: f64,
    pub delta: f64,
    pub k_max: usize,
    pub x_points: usize,
    pub theta_points: usize,
    /// Range of the first free parameter coordinate in sweeps.
    pub theta_range: (f64, f64),
}

pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    /// Holds the plant `f(x,u,θ)`; the model is its `θ = 0` slice.
    pub problem: MpcProblem,
    pub solvers: SolverRegistry,
    pub default_solver: &'static str,
    pub analytic: Option<AnalyticLaw>,
    pub theta_space: ThetaSpace,
    /// Bounding box of the steerable set `X_N`.
    pub state_box: StateBox,
    pub alpha3: ScalarComparisonFn,
    pub quadratic_track: bool,
    /// The plant is C¹ (finite-difference Jacobians are meaningful).
    pub differentiable: bool,
    /// `f(0,0,θ) = 0` for every `θ`.
    pub steady_state: bool,
    /// The terminal ingredients satisfy the terminal descent condition.
    pub terminal_descent: bool,
    pub lyapunov: Lyapunov,
    /// Known bound `γ_V(s,t)` on the mismatch perturbation of the Lyapunov
    /// function, used instead of the sampled envelope for the scaling test.
    pub gamma_v: Option<JointComparisonFn>,
    pub defaults: Defaults,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario").field("name", &self.name).finish()
    }
}

impl Scenario {
    pub fn plant(&self) -> &ParametricSystem {
        self.problem.system()
    }

    pub fn solver(&self, name: Option<&str>) -> Result<Arc<dyn OcpSolver>> {
        self.solvers.get(name.unwrap_or(self.default_solver))
    }

    /// `10 ×` the diameter of the `X_N` bounding box.
    pub fn escape_radius(&self) -> f64 {
        10.0 * self.state_box.diameter()
    }

    pub fn input_box(&self) -> StateBox {
        let b = self.problem.input_box();
        StateBox { lo: b.lo.clone(), hi: b.hi.clone() }
    }

    /// Spot checks of the standing assumptions on seeded samples.
    pub fn check(&self) -> Result<LoadReport> {
        let prob = &self.problem;
        let plant = self.plant();
        let (n, m) = (prob.n(), prob.m());
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ce7a);

        // Continuity at the origin and the steady state under mismatch.
        let zero_x = vec![0.0; n];
        let zero_u = vec![0.0; m];
        let mut steady_state_ok = true;
        if self.steady_state {
            for _ in 0..64 {
                let t: Vec<f64> = (0..self.theta_space.free_dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let th = self.theta_space.embed(&t);
                steady_state_ok &= plant.step(&zero_x, &zero_u, &th)?.iter().all(|v| *v == 0.0);
            }
        }

        // Positive definite stage cost: ℓ(x,u) ≥ c·|(x,u)|².
        let c = prob.cost().c1().min(mismatch_mpc::linalg::min_singular_value(prob.cost().r()));
        let input_box = self.input_box();
        let mut cost_ok = c > 0.0;
        for _ in 0..256 {
            let x = self.state_box.sample(&mut rng);
            let u = input_box.sample(&mut rng);
            let s = stacked_norm(&x, &u);
            cost_ok &= prob.cost().eval(&x, &u) >= c * s * s * (1.0 - 1e-12);
        }

        let descent = verify_assumption3(plant, prob.cost(), prob.terminal(), prob.input_box(), 2000, 7)?;
        let terminal_ok = !self.terminal_descent || descent.passed;
        let report = LoadReport {
            steady_state_ok,
            cost_ok,
            terminal_descent_claimed: self.terminal_descent,
            terminal_descent: descent,
        };
        if !(steady_state_ok && cost_ok && terminal_ok) {
            return Err(Error::InvalidInput(format!(
                "scenario `{}` fails its construction checks: {report:?}",
                self.name
            )));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadReport {
    pub steady_state_ok: bool,
    pub cost_ok: bool,
    pub terminal_descent_claimed: bool,
    pub terminal_descent: mismatch_mpc::terminal::Assumption3Report,
}

type Builder = fn() -> Result<Scenario>;

/// Scenario constructors by name.
#[derive(Clone)]
pub struct ScenarioRegistry {
    builders: BTreeMap<&'static str, Builder>,
}

impl Default for ScenarioRegistry {
    fn default() -> Self {
        let mut builders: BTreeMap<&'static str, Builder> = BTreeMap::new();
        builders.insert("integrator", integrator);
        builders.insert("signed-sqrt", signed_sqrt);
        builders.insert("sin", sin);
        builders.insert("pendulum", pendulum);
        Self { builders }
    }
}

impl ScenarioRegistry {
    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    /// Builds the scenario and runs its construction checks.
    pub fn load(&self, name: &str) -> Result<Scenario> {
        let build = self.builders.get(name).ok_or_else(|| Error::UnknownName {
            name: name.to_string(),
            valid: self.names().join(", "),
        })?;
        let sc = build()?;
        sc.check()?;
        Ok(sc)
    }
}

fn scalar_cost(q: f64, r: f64) -> Result<QuadraticCost> {
    QuadraticCost::new(Mat::diag(&[q]), Mat::diag(&[r]))
}

fn registry_with(law: Option<&AnalyticLaw>) -> SolverRegistry {
    let mut reg = SolverRegistry::with_defaults();
    if let Some(law) = law {
        reg.register(Arc::new(AnalyticSolver::new(law.clone())));
    }
    reg
}

fn sat(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

fn scalar_thetas(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|t| vec![*t]).collect()
}

/// `x⁺ = x + (1+θ)u`, `N = 2`.
pub fn integrator() -> Result<Scenario> {
    let sys = ParametricSystem::new("integrator", 1, 1, 1, |x, u, th| vec![x[0] + (1.0 + th[0]) * u[0]])
        .with_model_jacobian(|_, _| (Mat::diag(&[1.0]), Mat::diag(&[1.0])));
    let cost = scalar_cost(0.5, 0.5)?;
    let term = TerminalIngredients::new(Mat::diag(&[0.5]), 0.5, |x| vec![-x[0]])?;
    let problem = MpcProblem::new(sys, 2, InputBox::symmetric(1, 1.0), cost, term)?;
    let law = AnalyticLaw::new("-sat(3x/5)", (vec![-3.0], vec![3.0]), |x| {
        let x = x[0];
        if x.abs() <= 5.0 / 3.0 {
            InputSequence(vec![vec![-0.6 * x], vec![-0.2 * x]])
        } else {
            let s = x.signum();
            InputSequence(vec![vec![-s], vec![-0.5 * x + 0.5 * s]])
        }
    })
    .with_value_fn(|x| {
        let x = x[0];
        if x.abs() <= 5.0 / 3.0 {
            0.8 * x * x
        } else {
            let x1 = x - x.signum();
            0.5 * (x * x + 1.0) + 0.75 * x1 * x1
        }
    });
    Ok(Scenario {
        name: "integrator",
        description: "scalar integrator with an uncertain input gain, x+ = x + (1+θ)u",
        solvers: registry_with(Some(&law)),
        problem,
        default_solver: "gradient",
        analytic: Some(law),
        theta_space: ThetaSpace::full(1),
        state_box: StateBox::new(vec![-3.0], vec![3.0])?,
        alpha3: ScalarComparisonFn::quadratic(0.5),
        quadratic_track: true,
        differentiable: true,
        steady_state: true,
        terminal_descent: false,
        lyapunov: Lyapunov::ValueFunction,
        gamma_v: None,
        defaults: Defaults {
            x0: vec![vec![3.0]],
            thetas: scalar_thetas(&[0.0, 1.0, 2.0, 7.0 / 3.0, 3.0, -0.5, -0.9, -1.5]),
            rho: 8.0,
            delta: 0.9,
            k_max: 50,
            x_points: 81,
            theta_points: 41,
            theta_range: (-2.0, 4.0),
        },
    })
}

fn signed_root(y: f64) -> f64 {
    y.signum() * y.abs().sqrt()
}

/// `x⁺ = σ(x + (1+θ)u)` with the signed square root `σ`, `N = 1`.
pub fn signed_sqrt() -> Result<Scenario> {
    let sys = ParametricSystem::new("signed-sqrt", 1, 1, 1, |x, u, th| {
        vec![signed_root(x[0] + (1.0 + th[0]) * u[0])]
    });
    let cost = scalar_cost(1.0, 1.0)?;
    let term = TerminalIngredients::new(Mat::diag(&[4.0]), 4.0, |x| vec![-x[0]])?;
    let problem = MpcProblem::new(sys, 1, InputBox::symmetric(1, 1.0), cost, term)?;
    let law = AnalyticLaw::new("-sat(x)", (vec![-2.0], vec![2.0]), |x| InputSequence(vec![vec![-sat(x[0])]]))
        .with_value_fn(|x| {
            let a = x[0].abs();
            if a <= 1.0 {
                2.0 * a * a
            } else {
                a * a + 4.0 * a - 3.0
            }
        });
    Ok(Scenario {
        name: "signed-sqrt",
        description: "signed square root plant, robustly but not strongly stabilized",
        solvers: registry_with(Some(&law)),
        problem,
        default_solver: "analytic",
        analytic: Some(law),
        theta_space: ThetaSpace::full(1),
        state_box: StateBox::new(vec![-2.0], vec![2.0])?,
        alpha3: ScalarComparisonFn::quadratic(2.0),
        quadratic_track: true,
        differentiable: false,
        steady_state: true,
        terminal_descent: true,
        lyapunov: Lyapunov::ValueFunction,
        gamma_v: Some(JointComparisonFn::new("st+4sqrt(st)", |s, t| s * t + 4.0 * (s * t).sqrt())),
        defaults: Defaults {
            x0: vec![vec![2.0]],
            thetas: scalar_thetas(&[0.0, 0.25, 0.5, 1.0, -0.5]),
            rho: 2.0,
            delta: 0.5,
            k_max: 50,
            x_points: 81,
            theta_points: 41,
            theta_range: (-3.0, 3.0),
        },
    })
}

/// `|x|·sin(2π/x)`, continuous but not differentiable at 0.
pub fn oscillation(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs() * (2.0 * PI / x).sin()
    }
}

/// `x⁺ = x + γ(x)/2 + (1+θ)u`, `N = 1`.
pub fn sin() -> Result<Scenario> {
    let sys = ParametricSystem::new("sin", 1, 1, 1, |x, u, th| {
        vec![x[0] + 0.5 * oscillation(x[0]) + (1.0 + th[0]) * u[0]]
    });
    let cost = scalar_cost(1.0, 1.0)?;
    let term = TerminalIngredients::new(Mat::diag(&[4.0]), 4.0, |x| {
        vec![-0.5 * (x[0] + oscillation(x[0]))]
    })?;
    let problem = MpcProblem::new(sys, 1, InputBox::symmetric(1, 1.0), cost, term)?;
    let kappa = |x: f64| -sat(0.8 * x + 0.4 * oscillation(x));
    let law = AnalyticLaw::new("-sat(0.8x + 0.4γ(x))", (vec![-2.0], vec![2.0]), move |x| {
        InputSequence(vec![vec![kappa(x[0])]])
    })
    .with_value_fn(move |x| {
        let (x, u) = (x[0], kappa(x[0]));
        let next = x + 0.5 * oscillation(x) + u;
        x * x + u * u + 4.0 * next * next
    });
    Ok(Scenario {
        name: "sin",
        description: "plant with a nondifferentiable oscillating drift, strongly stabilized",
        solvers: registry_with(Some(&law)),
        problem,
        default_solver: "analytic",
        analytic: Some(law),
        theta_space: ThetaSpace::full(1),
        state_box: StateBox::new(vec![-2.0], vec![2.0])?,
        alpha3: ScalarComparisonFn::quadratic(0.75),
        quadratic_track: true,
        differentiable: false,
        steady_state: true,
        terminal_descent: true,
        lyapunov: Lyapunov::candidate("x^2", |x| {
            if x[0].abs() <= 2.0 {
                x[0] * x[0]
            } else {
                f64::INFINITY
            }
        }),
        gamma_v: None,
        defaults: Defaults {
            x0: vec![vec![2.0], vec![-1.0], vec![0.3]],
            thetas: scalar_thetas(&[0.0, 0.5, -0.5, 1.0]),
            rho: 4.0,
            delta: 0.5,
            k_max: 200,
            x_points: 81,
            theta_points: 41,
            theta_range: (-1.5, 1.5),
        },
    })
}

/// Pendulum about the upright position: the plant is the exact flow (`θ₃ = 1`),
/// the model its explicit Euler step. `θ₁` is unmodeled damping, `θ₂` the
/// motor gain error.
pub fn pendulum() -> Result<Scenario> {
    let ode = OdeSystem::new("pendulum", 2, 1, 3, |x, u, th| {
        vec![x[1], x[0].sin() - th[0] * th[0] * x[1] + (PENDULUM_GAIN + th[1]) * u[0]]
    });
    let disc = Discretization::new(PENDULUM_DELTA, 100)?;
    let d = PENDULUM_DELTA;
    let sys = blended_discretization("pendulum", ode, disc, 2).with_model_jacobian(move |x, _| {
        (
            Mat::from_rows(&[&[1.0, d], &[d * x[0].cos(), 1.0]]),
            Mat::from_rows(&[&[0.0], &[d * PENDULUM_GAIN]]),
        )
    });
    let consts = pendulum_terminal_constants()?;
    let cost = QuadraticCost::new(Mat::identity(2), Mat::identity(1))?;
    let term = TerminalIngredients::new(consts.p_f.clone(), consts.c_f, |x| vec![-2.0 * x[0] - 2.0 * x[1]])?;
    let problem = MpcProblem::new(sys, 20, InputBox::symmetric(1, 1.0), cost, term)?;
    Ok(Scenario {
        name: "pendulum",
        description: "inverted pendulum swing-up with discretization, damping and gain mismatch",
        solvers: registry_with(None),
        problem,
        default_solver: "gradient",
        analytic: None,
        theta_space: ThetaSpace::new(vec![0.0, 0.0, 1.0], vec![0, 1])?,
        state_box: StateBox::new(vec![-PI - 0.5, -6.0], vec![PI + 0.5, 6.0])?,
        alpha3: ScalarComparisonFn::quadratic(1.0),
        quadratic_track: true,
        differentiable: true,
        steady_state: true,
        terminal_descent: true,
        lyapunov: Lyapunov::ValueFunction,
        gamma_v: None,
        defaults: Defaults {
            x0: vec![vec![PI, 0.0]],
            thetas: vec![
                vec![0.0, 0.0, 1.0],
                vec![0.7, 0.0, 1.0],
                vec![0.0, 5.0, 1.0],
                vec![0.0, -4.5, 1.0],
            ],
            rho: 2.0,
            delta: 0.5,
            k_max: 150,
            x_points: 21,
            theta_points: 21,
            theta_range: (-1.0, 1.0),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mismatch_mpc::ocp::GradientSolver;

    #[test]
    fn all_scenarios_load() {
        let reg = ScenarioRegistry::default();
        assert_eq!(reg.names(), vec!["integrator", "pendulum", "signed-sqrt", "sin"]);
        for name in reg.names() {
            let sc = reg.load(name).unwrap();
            assert_eq!(sc.name, name);
            assert!(sc.solver(None).is_ok());
        }
    }

    #[test]
    fn unknown_name_lists_valid_names() {
        let err = ScenarioRegistry::default().load("cartpole").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("integrator") && msg.contains("pendulum"), "{msg}");
    }

    #[test]
    fn integrator_terminal_descent_fails_as_computed() {
        // ℓ(x,−x) + V_f(0) − V_f(x) = x²/2, largest at |x| = 1.
        let sc = integrator().unwrap();
        let rep = sc.check().unwrap().terminal_descent;
        assert!(!rep.passed);
        assert!((rep.max_violation - 0.5).abs() < 1e-2);
    }

    #[test]
    fn analytic_laws_match_values() {
        for sc in [integrator().unwrap(), signed_sqrt().unwrap(), sin().unwrap()] {
            let law = sc.analytic.as_ref().unwrap();
            for i in 0..=40 {
                let x = vec![-2.0 + 0.1 * i as f64];
                let v = sc.problem.objective(&x, &law.sequence(&x)).unwrap().value;
                assert!((v - law.value(&x).unwrap()).abs() < 1e-12, "{} x={x:?}", sc.name);
                let seq = law.sequence(&x);
                assert!(sc.problem.feasible(&x, &seq), "{} x={x:?}", sc.name);
            }
        }
    }

    #[test]
    fn sin_law_saturates_beyond_threshold() {
        let sc = sin().unwrap();
        let law = sc.analytic.unwrap();
        assert_eq!(law.kappa(&[2.0]), vec![-1.0]);
        assert!(law.kappa(&[1.69])[0] > -1.0);
        assert_eq!(law.kappa(&[1.70]), vec![-1.0]);
    }

    #[test]
    fn sin_analytic_law_is_near_optimal() {
        // Brute force over the input grid with golden refinement as an oracle.
        let sc = sin().unwrap();
        let brute = mismatch_mpc::ocp::BruteForceSolver::new(401);
        let law = sc.analytic.as_ref().unwrap();
        for i in 0..=20 {
            let x = vec![-2.0 + 0.2 * i as f64];
            let b = brute.solve(&sc.problem, &x, None).unwrap();
            assert!((b.value - law.value(&x).unwrap()).abs() < 1e-6, "x={x:?}");
        }
    }

    #[test]
    fn pendulum_hanging_state_is_equilibrium() {
        let sc = pendulum().unwrap();
        let x = sc.plant().step(&[PI, 0.0], &[0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((x[0] - PI).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn pendulum_is_feasible_from_rest() {
        let sc = pendulum().unwrap();
        let sol = GradientSolver::default().solve(&sc.problem, &[PI, 0.0], None).unwrap();
        assert!(sol.feasible, "{sol:?}");
    }
}
