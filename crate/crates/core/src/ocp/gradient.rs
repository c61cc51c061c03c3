//! Single-shooting solver: augmented Lagrangian on the scalar terminal
//! inequality `g(u) = V_f(φ̂(N)) − c_f ≤ 0`, inner spectral projected
//! gradient over the input box, gradients by an adjoint sweep.

use std::collections::VecDeque;

use super::{better, InputSequence, MpcProblem, OcpSolution, OcpSolver};
use crate::error::Result;
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSettings {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub grad_tol: f64,
    /// Terminal-constraint violation tolerance.
    pub viol_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Also start from the zero sequence when a warm start is given.
    pub multistart: bool,
}

impl Default for GradientSettings {
    fn default() -> Self {
        Self {
            max_outer: 200,
            max_inner: 2000,
            grad_tol: 1e-8,
            viol_tol: 1e-8,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e12,
            multistart: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradientSolver {
    pub settings: GradientSettings,
}

impl GradientSolver {
    pub fn new(settings: GradientSettings) -> Self {
        Self { settings }
    }
}

/// Augmented Lagrangian of the terminal inequality at fixed `(λ, μ)`.
struct Lagrangian<'a> {
    prob: &'a MpcProblem,
    x0: &'a [f64],
    zero_theta: Vec<f64>,
    lambda: f64,
    mu: f64,
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
    /// Signed terminal constraint `g(u)`.
    constraint: f64,
}

impl Lagrangian<'_> {
    fn eval(&self, u: &[f64]) -> Option<Eval> {
        let prob = self.prob;
        let (n, m, horizon) = (prob.n(), prob.m(), prob.horizon());
        let sys = prob.system();
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(self.x0.to_vec());
        let mut cost = 0.0;
        for k in 0..horizon {
            let uk = &u[k * m..(k + 1) * m];
            let xk = &states[k];
            cost += prob.cost().eval(xk, uk);
            let next = sys.model_step_unchecked(xk, uk, &self.zero_theta);
            states.push(next);
        }
        let x_n = &states[horizon];
        let vf = prob.terminal().value(x_n);
        cost += vf;
        let g = vf - prob.terminal().c_f();
        let weight = (self.lambda + self.mu * g).max(0.0);
        let value = cost + (weight * weight - self.lambda * self.lambda) / (2.0 * self.mu);
        if !value.is_finite() {
            return None;
        }

        let mut adjoint: Vec<f64> =
            prob.terminal().gradient(x_n).into_iter().map(|v| v * (1.0 + weight)).collect();
        let mut grad = vec![0.0; horizon * m];
        for k in (0..horizon).rev() {
            let uk = &u[k * m..(k + 1) * m];
            let xk = &states[k];
            let (a, b) = sys.model_jacobians(xk, uk);
            let (lx, lu) = prob.cost().gradient(xk, uk);
            let bt_adj = b.tr_mul_vec(&adjoint);
            for j in 0..m {
                grad[k * m + j] = lu[j] + bt_adj[j];
            }
            let at_adj = a.tr_mul_vec(&adjoint);
            adjoint = (0..n).map(|i| lx[i] + at_adj[i]).collect();
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Eval { value, grad, constraint: g })
    }
}

fn projected_step(prob: &MpcProblem, u: &[f64], grad: &[f64], alpha: f64) -> Vec<f64> {
    let m = prob.m();
    let bx = prob.input_box();
    u.iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (ui, gi))| (ui - alpha * gi).clamp(bx.lo[i % m], bx.hi[i % m]))
        .collect()
}

fn projected_gradient_norm(prob: &MpcProblem, u: &[f64], grad: &[f64]) -> f64 {
    projected_step(prob, u, grad, 1.0)
        .iter()
        .zip(u)
        .fold(0.0, |acc, (p, ui)| acc.max((p - ui).abs()))
}

const HISTORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const ALPHA_MIN: f64 = 1e-10;
const ALPHA_MAX: f64 = 1e10;
/// Outer iterations without a relative violation decrease of `STALL_REL`
/// after which the terminal constraint is declared unattainable.
const STALL_OUTER: usize = 8;
const STALL_REL: f64 = 1e-3;

struct InnerResult {
    iterations: usize,
    pg_norm: f64,
    constraint: f64,
}

impl GradientSolver {
    /// Nonmonotone spectral projected gradient on the box.
    fn minimize_box(&self, lag: &Lagrangian<'_>, u: &mut Vec<f64>) -> Option<InnerResult> {
        let prob = lag.prob;
        let mut cur = lag.eval(u)?;
        let mut pg = projected_gradient_norm(prob, u, &cur.grad);
        let mut alpha = (1.0 / pg.max(1e-12)).clamp(ALPHA_MIN, ALPHA_MAX);
        let mut history: VecDeque<f64> = VecDeque::from([cur.value]);
        let mut iterations = 0;
        while iterations < self.settings.max_inner && pg > self.settings.grad_tol {
            iterations += 1;
            let trial = projected_step(prob, u, &cur.grad, alpha);
            let d: Vec<f64> = trial.iter().zip(u.iter()).map(|(t, ui)| t - ui).collect();
            let slope = dot(&cur.grad, &d);
            if slope >= 0.0 {
                break;
            }
            let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut step = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = u.iter().zip(&d).map(|(ui, di)| ui + step * di).collect();
                if let Some(e) = lag.eval(&cand) {
                    if e.value <= reference + ARMIJO * step * slope {
                        break Some((cand, e));
                    }
                    let denom = 2.0 * (e.value - cur.value - step * slope);
                    let interp = if denom > 0.0 { -slope * step * step / denom } else { 0.5 * step };
                    step = interp.clamp(0.1 * step, 0.5 * step);
                } else {
                    step *= 0.1;
                }
                if step < 1e-20 {
                    break None;
                }
            };
            let Some((cand, next)) = accepted else { break };
            let s: Vec<f64> = cand.iter().zip(u.iter()).map(|(c, ui)| c - ui).collect();
            let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
            let sty = dot(&s, &y);
            alpha = if sty > 0.0 { (dot(&s, &s) / sty).clamp(ALPHA_MIN, ALPHA_MAX) } else { ALPHA_MAX };
            *u = cand;
            cur = next;
            pg = projected_gradient_norm(prob, u, &cur.grad);
            history.push_back(cur.value);
            if history.len() > HISTORY {
                history.pop_front();
            }
        }
        Some(InnerResult { iterations, pg_norm: pg, constraint: cur.constraint })
    }

    fn run(&self, prob: &MpcProblem, x: &[f64], start: &InputSequence) -> Result<OcpSolution> {
        let s = &self.settings;
        let mut u = start.projected(prob.input_box()).flatten();
        let mut lag = Lagrangian {
            prob,
            x0: x,
            zero_theta: vec![0.0; prob.system().n_theta()],
            lambda: 0.0,
            mu: s.penalty_init,
        };
        let mut total = 0;
        let mut kkt = f64::INFINITY;
        let mut prev_violation = f64::INFINITY;
        let mut best_violation = f64::INFINITY;
        let mut no_progress = 0;
        for _ in 0..s.max_outer {
            let before = u.clone();
            let Some(inner) = self.minimize_box(&lag, &mut u) else { break };
            total += inner.iterations;
            kkt = inner.pg_norm;
            let violation = inner.constraint.max(0.0);
            let new_lambda = (lag.lambda + lag.mu * inner.constraint).max(0.0);
            let converged = inner.pg_norm <= s.grad_tol && violation <= s.viol_tol;
            let stalled = before == u && new_lambda == lag.lambda;
            lag.lambda = new_lambda;
            if converged || stalled {
                break;
            }
            // An infeasible problem shows up as a violation that stops shrinking.
            if violation < best_violation * (1.0 - STALL_REL) {
                best_violation = violation;
                no_progress = 0;
            } else {
                no_progress += 1;
                if no_progress >= STALL_OUTER && violation > s.viol_tol {
                    break;
                }
            }
            if violation > 0.25 * prev_violation {
                lag.mu = (lag.mu * s.penalty_growth).min(s.penalty_max);
            }
            prev_violation = violation;
        }
        prob.evaluate(x, InputSequence::from_flat(&u, prob.m()), total, kkt)
    }
}

impl OcpSolver for GradientSolver {
    fn name(&self) -> &str {
        "gradient"
    }

    fn solve(
        &self,
        prob: &MpcProblem,
        x: &[f64],
        warm: Option<&InputSequence>,
    ) -> Result<OcpSolution> {
        let zero = InputSequence::zeros(prob.horizon(), prob.m());
        let Some(warm) = warm else {
            return self.run(prob, x, &zero);
        };
        let mut best = self.run(prob, x, warm)?;
        if self.settings.multistart {
            best = better(best, self.run(prob, x, &zero)?);
        }
        // The candidate itself, so a feasible warm start is never made worse.
        let projected = warm.projected(prob.input_box());
        if projected.len() == prob.horizon() {
            let own = prob.evaluate(x, projected, 0, f64::NAN)?;
            best = better(best, own);
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_problems::integrator;
    use super::*;

    #[test]
    fn integrator_unsaturated() {
        let p = integrator();
        let sol = GradientSolver::default().solve(&p, &[1.0], None).unwrap();
        assert!(sol.feasible);
        assert!((sol.u_opt.0[0][0] + 0.6).abs() < 1e-5 && (sol.u_opt.0[1][0] + 0.2).abs() < 1e-5);
        assert!((sol.value - 0.8).abs() < 1e-5);
    }

    #[test]
    fn integrator_saturated_at_boundary() {
        let p = integrator();
        let sol = GradientSolver::default().solve(&p, &[3.0], None).unwrap();
        assert!(sol.feasible, "{sol:?}");
        assert!((sol.first_input()[0] + 1.0).abs() < 1e-6);
        assert!(sol.terminal_value <= p.terminal().c_f() + 1e-8);
    }

    #[test]
    fn origin_is_optimal_at_origin() {
        let p = integrator();
        let sol = GradientSolver::default().solve(&p, &[0.0], None).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.u_opt.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn outside_steerable_set_is_infeasible() {
        let p = integrator();
        let sol = GradientSolver::default().solve(&p, &[3.5], None).unwrap();
        assert!(!sol.feasible);
        assert_eq!(sol.optimal_value(), f64::INFINITY);
    }

    #[test]
    fn recomputed_value_matches() {
        let p = integrator();
        for x in [-2.5, -1.0, 0.3, 2.2] {
            let sol = GradientSolver::default().solve(&p, &[x], None).unwrap();
            let v = p.objective(&[x], &sol.u_opt).unwrap().value;
            assert!((v - sol.value).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn never_worse_than_feasible_warm_start() {
        let p = integrator();
        let warm = InputSequence(vec![vec![-0.5], vec![-0.3]]);
        let sol = GradientSolver::default().solve(&p, &[1.0], Some(&warm)).unwrap();
        assert!(sol.value <= p.objective(&[1.0], &warm).unwrap().value + 1e-10);
    }
}
