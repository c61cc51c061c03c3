//! The finite-horizon optimal control problem
//!
//! ```text
//! V_N⁰(x) = min_{u ∈ U^N} Σ_{k<N} ℓ(φ̂(k), u(k)) + V_f(φ̂(N))   s.t.  φ̂(N) ∈ X_f
//! ```
//!
//! with interchangeable solvers behind [`OcpSolver`], selected by name through
//! a [`SolverRegistry`].

mod analytic;
mod brute;
mod gradient;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

pub use analytic::{AnalyticLaw, AnalyticSolver};
pub use brute::BruteForceSolver;
pub use gradient::{GradientSettings, GradientSolver};

use crate::error::{invalid, Error, Result};
use crate::model::ParametricSystem;
use crate::terminal::{QuadraticCost, TerminalIngredients};

/// Terminal-constraint slack used by feasibility tests.
pub const TERMINAL_TOL: f64 = 1e-8;
/// Slack on the input box.
pub const BOX_TOL: f64 = 1e-12;

/// Per-coordinate interval box `U`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(invalid("input box needs lo <= hi coordinatewise"));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(m: usize, bound: f64) -> Self {
        Self { lo: vec![-bound; m], hi: vec![bound; m] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| {
                *v >= l - tol && *v <= h + tol
            })
    }

    pub fn project(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }
}

/// `u = (u(0), …, u(N−1))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputSequence(pub Vec<Vec<f64>>);

impl InputSequence {
    pub fn zeros(horizon: usize, m: usize) -> Self {
        Self(vec![vec![0.0; m]; horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<&Vec<f64>> {
        self.0.first()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64], m: usize) -> Self {
        Self(flat.chunks(m).map(<[f64]>::to_vec).collect())
    }

    /// Clamps every element onto `U`.
    pub fn projected(&self, input_box: &InputBox) -> Self {
        let mut out = self.clone();
        for u in &mut out.0 {
            input_box.project(u);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OcpSolution {
    pub u_opt: InputSequence,
    pub x_traj: Vec<Vec<f64>>,
    pub value: f64,
    pub terminal_value: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl OcpSolution {
    /// `κ_N(x) = u⁰(0; x)`
    pub fn first_input(&self) -> &[f64] {
        self.u_opt.first().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `V_N⁰(x)`, with `∞` for infeasible problems.
    pub fn optimal_value(&self) -> f64 {
        if self.feasible {
            self.value
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub value: f64,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MpcProblem {
    sys: ParametricSystem,
    horizon: usize,
    input_box: InputBox,
    cost: QuadraticCost,
    terminal: TerminalIngredients,
}

impl MpcProblem {
    pub fn new(
        sys: ParametricSystem,
        horizon: usize,
        input_box: InputBox,
        cost: QuadraticCost,
        terminal: TerminalIngredients,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        if input_box.dim() != sys.m() {
            return Err(invalid("input box dimension differs from the system input dimension"));
        }
        if !input_box.contains(&vec![0.0; sys.m()], 0.0) {
            return Err(invalid("U must contain the origin"));
        }
        if cost.q().rows() != sys.n() || cost.r().rows() != sys.m() {
            return Err(invalid("cost weights do not match the system dimensions"));
        }
        if terminal.p_f().rows() != sys.n() {
            return Err(invalid("P_f does not match the state dimension"));
        }
        let zero_x = vec![0.0; sys.n()];
        let zero_u = vec![0.0; sys.m()];
        if sys.model_step(&zero_x, &zero_u)?.iter().any(|v| *v != 0.0) {
            return Err(invalid("model must have the origin as a steady state"));
        }
        if cost.eval(&zero_x, &zero_u) != 0.0 || terminal.value(&zero_x) != 0.0 {
            return Err(invalid("costs must vanish at the origin"));
        }
        Ok(Self { sys, horizon, input_box, cost, terminal })
    }

    pub fn system(&self) -> &ParametricSystem {
        &self.sys
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn input_box(&self) -> &InputBox {
        &self.input_box
    }
    pub fn cost(&self) -> &QuadraticCost {
        &self.cost
    }
    pub fn terminal(&self) -> &TerminalIngredients {
        &self.terminal
    }
    pub fn n(&self) -> usize {
        self.sys.n()
    }
    pub fn m(&self) -> usize {
        self.sys.m()
    }

    fn check_sequence(&self, x: &[f64], u: &InputSequence) -> Result<()> {
        if x.len() != self.n() {
            return Err(invalid(format!("state has length {}, expected {}", x.len(), self.n())));
        }
        if u.len() != self.horizon || u.0.iter().any(|v| v.len() != self.m()) {
            return Err(invalid("input sequence does not match horizon and input dimension"));
        }
        Ok(())
    }

    /// `V_N(x, u)`, rolling the model forward; also returns the rolled states.
    pub fn objective(&self, x: &[f64], u: &InputSequence) -> Result<Rollout> {
        self.check_sequence(x, u)?;
        let zero = vec![0.0; self.sys.n_theta()];
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(x.to_vec());
        let mut value = 0.0;
        for uk in &u.0 {
            let xk = states.last().expect("nonempty");
            value += self.cost.eval(xk, uk);
            let next = self.sys.model_step_unchecked(xk, uk, &zero);
            states.push(next);
        }
        value += self.terminal.value(states.last().expect("nonempty"));
        if !value.is_finite() || states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow("objective is not finite".into()));
        }
        Ok(Rollout { value, states })
    }

    /// `u ∈ U^N` (within `1e-12`) and `V_f(φ̂(N; x, u)) ≤ c_f + 1e-8`.
    pub fn feasible(&self, x: &[f64], u: &InputSequence) -> bool {
        if u.0.iter().any(|v| !self.input_box.contains(v, BOX_TOL)) {
            return false;
        }
        match self.objective(x, u) {
            Ok(r) => self.terminal.contains(r.states.last().expect("nonempty"), TERMINAL_TOL),
            Err(_) => false,
        }
    }

    /// Assembles a solution record for a given sequence, evaluating the
    /// objective and feasibility independently of how `u` was found.
    pub fn evaluate(
        &self,
        x: &[f64],
        u: InputSequence,
        iterations: usize,
        kkt_residual: f64,
    ) -> Result<OcpSolution> {
        let rollout = self.objective(x, &u)?;
        let terminal_value = self.terminal.value(rollout.states.last().expect("nonempty"));
        let feasible = self.feasible(x, &u);
        Ok(OcpSolution {
            u_opt: u,
            x_traj: rollout.states,
            value: rollout.value,
            terminal_value,
            feasible,
            iterations,
            kkt_residual,
        })
    }

    /// `ũ = (u⁰(1), …, u⁰(N−1), κ_f(x̂⁰(N)))`
    pub fn warm_start(&self, prev: &OcpSolution) -> Result<InputSequence> {
        if !prev.feasible {
            return Err(invalid("warm_start needs a feasible previous solution"));
        }
        let mut seq: Vec<Vec<f64>> = prev.u_opt.0.iter().skip(1).cloned().collect();
        seq.push(self.terminal.kappa_f(prev.x_traj.last().expect("nonempty")));
        Ok(InputSequence(seq))
    }
}

/// A strategy for computing (approximate) minimizers of the OCP.
pub trait OcpSolver: Send + Sync {
    fn name(&self) -> &str;

    fn solve(&self, prob: &MpcProblem, x: &[f64], warm: Option<&InputSequence>)
        -> Result<OcpSolution>;
}

/// `κ_N(x) = u⁰(0; x)`
pub fn control_law(
    solver: &dyn OcpSolver,
    prob: &MpcProblem,
    x: &[f64],
    warm: Option<&InputSequence>,
) -> Result<Vec<f64>> {
    Ok(solver.solve(prob, x, warm)?.first_input().to_vec())
}

/// Picks the better of two candidate solutions: feasible beats infeasible,
/// then lower value, then the earlier candidate.
pub(crate) fn better(a: OcpSolution, b: OcpSolution) -> OcpSolution {
    match (a.feasible, b.feasible) {
        (true, false) => a,
        (false, true) => b,
        (true, true) => {
            if b.value < a.value {
                b
            } else {
                a
            }
        }
        (false, false) => {
            if b.terminal_value < a.terminal_value {
                b
            } else {
                a
            }
        }
    }
}

/// Named solver strategies.
#[derive(Clone, Default)]
pub struct SolverRegistry {
    solvers: BTreeMap<String, Arc<dyn OcpSolver>>,
}

impl SolverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the general-purpose solvers (`gradient`, `brute-force`).
    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(GradientSolver::default()));
        reg.register(Arc::new(BruteForceSolver::default()));
        reg
    }

    pub fn register(&mut self, solver: Arc<dyn OcpSolver>) {
        self.solvers.insert(solver.name().to_string(), solver);
    }

    pub fn names(&self) -> Vec<&str> {
        self.solvers.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn OcpSolver>> {
        self.solvers.get(name).cloned().ok_or_else(|| Error::UnknownName {
            name: name.to_string(),
            valid: self.names().join(", "),
        })
    }
}

#[cfg(test)]
pub(crate) mod test_problems {
    use super::*;
    use crate::linalg::Mat;

    /// `x⁺ = x + (1+θ)u`, `U = [-1,1]`, `ℓ = (x²+u²)/2`, `V_f = x²/2`, `X_f = [-1,1]`, `N = 2`.
    pub fn integrator() -> MpcProblem {
        let sys = ParametricSystem::new("integrator", 1, 1, 1, |x, u, th| {
            vec![x[0] + (1.0 + th[0]) * u[0]]
        });
        let cost = QuadraticCost::new(Mat::diag(&[0.5]), Mat::diag(&[0.5])).unwrap();
        let term = TerminalIngredients::new(Mat::diag(&[0.5]), 0.5, |x| vec![-x[0]]).unwrap();
        MpcProblem::new(sys, 2, InputBox::symmetric(1, 1.0), cost, term).unwrap()
    }

    pub fn signed_sqrt() -> MpcProblem {
        let sys = ParametricSystem::new("signed-sqrt", 1, 1, 1, |x, u, th| {
            let y = x[0] + (1.0 + th[0]) * u[0];
            vec![y.signum() * y.abs().sqrt()]
        });
        let cost = QuadraticCost::new(Mat::diag(&[1.0]), Mat::diag(&[1.0])).unwrap();
        let term = TerminalIngredients::new(Mat::diag(&[4.0]), 4.0, |x| vec![-x[0]]).unwrap();
        MpcProblem::new(sys, 1, InputBox::symmetric(1, 1.0), cost, term).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_problems::*;
    use super::*;

    fn seq(v: &[f64]) -> InputSequence {
        InputSequence(v.iter().map(|x| vec![*x]).collect())
    }

    #[test]
    fn objective_examples() {
        let p = integrator();
        assert_eq!(p.objective(&[0.0], &seq(&[0.0, 0.0])).unwrap().value, 0.0);
        let v = p.objective(&[1.0], &seq(&[-0.6, -0.2])).unwrap().value;
        assert!((v - 0.8).abs() < 1e-14);
        let s = signed_sqrt();
        let v = s.objective(&[0.5], &seq(&[-0.5])).unwrap().value;
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn objective_rejects_bad_lengths() {
        let p = integrator();
        assert!(matches!(p.objective(&[1.0], &seq(&[0.0])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn feasibility_examples() {
        let p = integrator();
        assert!(p.feasible(&[3.0], &seq(&[-1.0, -1.0])));
        assert!(!p.feasible(&[3.5], &seq(&[-1.0, -1.0])));
        assert!(!p.feasible(&[0.0], &seq(&[1.5, -1.5])));
        // terminal-law rollout from inside X_f
        for x in [-1.0, -0.4, 0.0, 0.7, 1.0] {
            let u0 = -x;
            let u1 = -(x + u0);
            assert!(p.feasible(&[x], &seq(&[u0, u1])));
        }
    }

    #[test]
    fn warm_start_shifts_and_appends() {
        let p = integrator();
        let sol = p.evaluate(&[1.0], seq(&[-0.6, -0.2]), 0, 0.0).unwrap();
        let w = p.warm_start(&sol).unwrap();
        assert!((w.0[0][0] + 0.2).abs() < 1e-15 && (w.0[1][0] + 0.2).abs() < 1e-15);

        let zero = p.evaluate(&[0.0], seq(&[0.0, 0.0]), 0, 0.0).unwrap();
        assert_eq!(p.warm_start(&zero).unwrap(), seq(&[0.0, 0.0]));

        let bad = p.evaluate(&[3.5], seq(&[-1.0, -1.0]), 0, 0.0).unwrap();
        assert!(matches!(p.warm_start(&bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn projection_is_idempotent_on_feasible_sequences() {
        let b = InputBox::symmetric(1, 1.0);
        let s = seq(&[-1.0, 0.3]);
        assert_eq!(s.projected(&b), s);
        let s = seq(&[-3.0, 0.3]);
        assert_eq!(s.projected(&b), seq(&[-1.0, 0.3]));
    }

    #[test]
    fn registry_lookup() {
        let reg = SolverRegistry::with_defaults();
        assert_eq!(reg.names(), vec!["brute-force", "gradient"]);
        assert!(reg.get("gradient").is_ok());
        match reg.get("newton") {
            Err(Error::UnknownName { valid, .. }) => assert!(valid.contains("gradient")),
            _ => panic!("expected unknown-name error"),
        }
    }

    #[test]
    fn problem_construction_checks() {
        let sys = ParametricSystem::new("shifted", 1, 1, 1, |x, u, _| vec![x[0] + u[0] + 1.0]);
        let cost = QuadraticCost::new(Mat::diag(&[1.0]), Mat::diag(&[1.0])).unwrap();
        let term = TerminalIngredients::new(Mat::diag(&[1.0]), 1.0, |x| vec![-x[0]]).unwrap();
        let r = MpcProblem::new(sys, 1, InputBox::symmetric(1, 1.0), cost.clone(), term.clone());
        assert!(r.is_err());
        let sys = ParametricSystem::new("ok", 1, 1, 1, |x, u, _| vec![x[0] + u[0]]);
        let r = MpcProblem::new(sys, 1, InputBox::new(vec![0.5], vec![1.0]).unwrap(), cost, term);
        assert!(r.is_err());
    }

    use crate::linalg::Mat;
}
