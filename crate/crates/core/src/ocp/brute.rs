//! Exhaustive grid search over `U^N` for scalar inputs and horizons ≤ 2,
//! refined by one golden-section pass per coordinate. Used as an oracle.

use super::{InputSequence, MpcProblem, OcpSolution, OcpSolver};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BruteForceSolver {
    pub grid_per_dim: usize,
}

impl Default for BruteForceSolver {
    fn default() -> Self {
        Self { grid_per_dim: 201 }
    }
}

const GOLDEN_ITERS: usize = 80;

impl BruteForceSolver {
    pub fn new(grid_per_dim: usize) -> Self {
        Self { grid_per_dim }
    }

    fn penalized(&self, prob: &MpcProblem, x: &[f64], u: &[f64]) -> f64 {
        let seq = InputSequence::from_flat(u, 1);
        if !prob.feasible(x, &seq) {
            return f64::INFINITY;
        }
        prob.objective(x, &seq).map_or(f64::INFINITY, |r| r.value)
    }

    fn golden(&self, prob: &MpcProblem, x: &[f64], u: &mut [f64], coord: usize, lo: f64, hi: f64) {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let eval = |t: f64, u: &[f64]| {
            let mut v = u.to_vec();
            v[coord] = t;
            self.penalized(prob, x, &v)
        };
        let (mut a, mut b) = (lo, hi);
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (eval(c, u), eval(d, u));
        for _ in 0..GOLDEN_ITERS {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = eval(c, u);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = eval(d, u);
            }
        }
        let t = 0.5 * (a + b);
        if eval(t, u) < eval(u[coord], u) {
            u[coord] = t;
        }
    }
}

impl OcpSolver for BruteForceSolver {
    fn name(&self) -> &str {
        "brute-force"
    }

    fn solve(
        &self,
        prob: &MpcProblem,
        x: &[f64],
        _warm: Option<&InputSequence>,
    ) -> Result<OcpSolution> {
        let horizon = prob.horizon();
        if prob.m() != 1 || horizon > 2 {
            return Err(Error::Unsupported(
                "brute-force search needs a scalar input and horizon <= 2".into(),
            ));
        }
        if self.grid_per_dim < 101 {
            return Err(Error::Unsupported("brute-force search needs >= 101 grid points".into()));
        }
        let (lo, hi) = (prob.input_box().lo[0], prob.input_box().hi[0]);
        let g = self.grid_per_dim;
        let grid: Vec<f64> = (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64).collect();

        // Lexicographic enumeration; strict improvement keeps the smallest tie.
        let total = g.pow(horizon as u32);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut least_violation: Option<(f64, Vec<f64>)> = None;
        let mut u = vec![0.0; horizon];
        for idx in 0..total {
            let mut rem = idx;
            for k in (0..horizon).rev() {
                u[k] = grid[rem % g];
                rem /= g;
            }
            let seq = InputSequence::from_flat(&u, 1);
            let Ok(rollout) = prob.objective(x, &seq) else { continue };
            let term = prob.terminal().value(rollout.states.last().expect("nonempty"));
            if prob.feasible(x, &seq) {
                if best.as_ref().map_or(true, |(v, _)| rollout.value < *v) {
                    best = Some((rollout.value, u.clone()));
                }
            } else if least_violation.as_ref().map_or(true, |(t, _)| term < *t) {
                least_violation = Some((term, u.clone()));
            }
        }

        let Some((_, mut u)) = best else {
            let (_, u) = least_violation.unwrap_or((f64::INFINITY, vec![0.0; horizon]));
            return prob.evaluate(x, InputSequence::from_flat(&u, 1), total, f64::NAN);
        };
        let h = (hi - lo) / (g - 1) as f64;
        for coord in 0..horizon {
            let a = (u[coord] - h).max(lo);
            let b = (u[coord] + h).min(hi);
            self.golden(prob, x, &mut u, coord, a, b);
        }
        prob.evaluate(x, InputSequence::from_flat(&u, 1), total, f64::NAN)
    }
}
