//! Quadratic costs, terminal ingredients `(V_f, X_f, κ_f)`, discrete Lyapunov
//! synthesis and the sampled terminal-descent check.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat};
use crate::model::ParametricSystem;
use crate::ocp::InputBox;

/// Maximum allowed `V_f(f̂(x,κ_f(x))) − V_f(x) + ℓ(x,κ_f(x))` for a pass.
pub const DESCENT_TOL: f64 = 1e-9;

/// `ℓ(x,u) = |x|²_Q + |u|²_R`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q: Mat,
    r: Mat,
}

impl QuadraticCost {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !m.is_square() || m.asymmetry() > 1e-12 {
                return Err(invalid(format!("{name} must be square and symmetric")));
            }
            if linalg::min_singular_value(m) <= 0.0 {
                return Err(invalid(format!("{name} must be positive definite")));
            }
        }
        Ok(Self { q, r })
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        self.q.quad_form(x) + self.r.quad_form(u)
    }

    /// `(∂ℓ/∂x, ∂ℓ/∂u)`
    pub fn gradient(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gx = self.q.mul_vec(x).into_iter().map(|v| 2.0 * v).collect();
        let gu = self.r.mul_vec(u).into_iter().map(|v| 2.0 * v).collect();
        (gx, gu)
    }

    /// `σ̲(Q)`, the quadratic lower-bound constant of `ℓ` in `x`.
    pub fn c1(&self) -> f64 {
        linalg::min_singular_value(&self.q)
    }
}

type FeedbackFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// `V_f(x) = |x|²_{P_f}`, `X_f = lev_{c_f} V_f`, and the terminal law `κ_f`.
#[derive(Clone)]
pub struct TerminalIngredients {
    p_f: Mat,
    c_f: f64,
    kappa_f: Arc<FeedbackFn>,
}

impl fmt::Debug for TerminalIngredients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalIngredients").field("p_f", &self.p_f).field("c_f", &self.c_f).finish()
    }
}

impl TerminalIngredients {
    pub fn new(
        p_f: Mat,
        c_f: f64,
        kappa_f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !p_f.is_square() || p_f.asymmetry() > 1e-9 {
            return Err(invalid("P_f must be square and symmetric"));
        }
        if linalg::symmetric_eigenvalues(&p_f)[0] <= 0.0 {
            return Err(invalid("P_f must be positive definite"));
        }
        if !(c_f > 0.0) {
            return Err(invalid("c_f must be positive"));
        }
        Ok(Self { p_f, c_f, kappa_f: Arc::new(kappa_f) })
    }

    pub fn p_f(&self) -> &Mat {
        &self.p_f
    }
    pub fn c_f(&self) -> f64 {
        self.c_f
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.p_f.quad_form(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.p_f.mul_vec(x).into_iter().map(|v| 2.0 * v).collect()
    }

    pub fn kappa_f(&self, x: &[f64]) -> Vec<f64> {
        (self.kappa_f)(x)
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.value(x) <= self.c_f + tol
    }

    /// Half-widths of the axis-aligned box enclosing `X_f`.
    pub fn bounding_half_widths(&self) -> Result<Vec<f64>> {
        let inv = self.p_f.inverse()?;
        Ok((0..inv.rows()).map(|i| (self.c_f * inv[(i, i)]).sqrt()).collect())
    }

    /// Uniform samples of `X_f` by rejection from its bounding box.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let half = self.bounding_half_widths()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > 1000 * count.max(1) {
                return Err(Error::Inconclusive("rejection sampling of X_f stalled".into()));
            }
            let x: Vec<f64> = half.iter().map(|h| rng.gen_range(-h..=*h)).collect();
            if self.contains(&x, 0.0) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// Linearization `(A, B)` at the origin with stabilizing gain `K` (`u = −Kx`).
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub a: Mat,
    pub b: Mat,
    pub k: Mat,
}

impl LinearFeedback {
    /// `A_K = A − BK`
    pub fn closed_loop(&self) -> Mat {
        self.a.sub(&self.b.matmul(&self.k))
    }

    pub fn is_stabilizing(&self) -> bool {
        linalg::spectral_radius(&self.closed_loop()) < 1.0
    }

    /// `Q_K = Q + KᵀRK`
    pub fn closed_loop_cost(&self, cost: &QuadraticCost) -> Mat {
        cost.q().add(&self.k.transpose().matmul(cost.r()).matmul(&self.k))
    }
}

/// Solves `AᵀPA − P = −C` through the column-stacked linear system
/// `(Aᵀ⊗Aᵀ − I) vec(P) = −vec(C)`.
pub fn dlyap_solve(a: &Mat, c: &Mat) -> Result<Mat> {
    let n = a.rows();
    if !a.is_square() || c.rows() != n || c.cols() != n {
        return Err(invalid("dlyap_solve: A and C must be n×n"));
    }
    if c.asymmetry() > 1e-12 * (1.0 + c.max_abs()) {
        return Err(invalid("dlyap_solve: C must be symmetric"));
    }
    if n > 8 {
        return Err(Error::Unsupported("dlyap_solve is sized for n <= 8".into()));
    }
    if linalg::spectral_radius(a) >= 1.0 {
        return Err(Error::NoSolution("spectral radius of A is not below 1".into()));
    }
    let idx = |i: usize, j: usize| j * n + i;
    let mut m = Mat::zeros(n * n, n * n);
    let mut rhs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let row = idx(i, j);
            rhs[row] = -c[(i, j)];
            for k in 0..n {
                for l in 0..n {
                    m[(row, idx(k, l))] += a[(k, i)] * a[(l, j)];
                }
            }
            m[(row, row)] -= 1.0;
        }
    }
    let vec_p = linalg::solve_linear(&m, &rhs)?;
    let mut p = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = 0.5 * (vec_p[idx(i, j)] + vec_p[idx(j, i)]);
        }
    }
    Ok(p)
}

/// `max |AᵀPA − P + C|`
pub fn dlyap_residual(a: &Mat, p: &Mat, c: &Mat) -> f64 {
    a.transpose().matmul(p).matmul(a).sub(p).add(c).max_abs()
}

/// Roots of `λ² − tr(A)λ + det(A)`.
pub fn eigenvalues_2x2(a: &Mat) -> [Complex64; 2] {
    assert!(a.rows() == 2 && a.cols() == 2, "eigenvalues_2x2 needs a 2×2 matrix");
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let disc = Complex64::new(tr * tr - 4.0 * det, 0.0).sqrt();
    let half = Complex64::new(tr / 2.0, 0.0);
    [half + disc / 2.0, half - disc / 2.0]
}

#[derive(Debug, Clone, Serialize)]
pub struct Assumption3Report {
    pub samples: usize,
    pub max_violation: f64,
    pub worst_point: Vec<f64>,
    pub input_feasible: bool,
    pub passed: bool,
}

/// Checks `V_f(f̂(x,κ_f(x))) ≤ V_f(x) − ℓ(x,κ_f(x))` and `κ_f(x) ∈ U` on
/// uniform samples of `X_f`.
pub fn verify_assumption3(
    sys: &ParametricSystem,
    cost: &QuadraticCost,
    term: &TerminalIngredients,
    input_box: &InputBox,
    sample_count: usize,
    seed: u64,
) -> Result<Assumption3Report> {
    if sample_count == 0 {
        return Err(invalid("verify_assumption3: empty sample set"));
    }
    let samples = term.sample(sample_count, seed)?;
    let mut max_violation = f64::NEG_INFINITY;
    let mut worst_point = vec![0.0; sys.n()];
    let mut input_feasible = true;
    for x in &samples {
        let u = term.kappa_f(x);
        input_feasible &= input_box.contains(&u, 1e-12);
        let next = sys.model_step(x, &u)?;
        let violation = term.value(&next) - term.value(x) + cost.eval(x, &u);
        if violation > max_violation {
            max_violation = violation;
            worst_point = x.clone();
        }
    }
    Ok(Assumption3Report {
        samples: samples.len(),
        max_violation,
        worst_point,
        input_feasible,
        passed: input_feasible && max_violation <= DESCENT_TOL,
    })
}

/// Sample time and model motor gain of the pendulum design.
pub const PENDULUM_DELTA: f64 = 0.1;
pub const PENDULUM_GAIN: f64 = 5.0;

/// The pendulum's linearization `x⁺ = Ax + Bu` about the upright position,
/// with `B = Δ·[0; k̂]`, and the gain `K = [2 2]`.
pub fn pendulum_linear_feedback() -> LinearFeedback {
    let d = PENDULUM_DELTA;
    LinearFeedback {
        a: Mat::from_rows(&[&[1.0, d], &[d, 1.0]]),
        b: Mat::from_rows(&[&[0.0], &[d * PENDULUM_GAIN]]),
        k: Mat::from_rows(&[&[2.0, 2.0]]),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PendulumConstants {
    pub p_f: Mat,
    /// `[P_f]₂₂Δ²/36`
    pub a: f64,
    /// `Δ·|A_Kᵀ P_f e₂|/3`
    pub b: f64,
    /// Positive root of `1 − b·s − s²` (the reported value `0.9774…`).
    pub x_star: f64,
    /// Negative root of `1 − b·s − s²` (the reported value `−1.0231…`).
    pub x_lower: f64,
    /// Positive root of the bracket `1 − b·s² − a·s⁴` itself.
    pub bracket_root: f64,
    pub c_f: f64,
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let flo = f(lo);
    assert!(flo * f(hi) <= 0.0, "bisection bracket has no sign change");
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Synthesizes `P_f` from `A_Kᵀ P_f A_K − P_f = −2Q_K` and derives the
/// terminal-set constants of the pendulum design.
pub fn pendulum_terminal_constants() -> Result<PendulumConstants> {
    let lf = pendulum_linear_feedback();
    let cost = QuadraticCost::new(Mat::identity(2), Mat::identity(1))?;
    let a_k = lf.closed_loop();
    let q_k = lf.closed_loop_cost(&cost);
    let p_f = dlyap_solve(&a_k, &q_k.scale(2.0))?;
    let d = PENDULUM_DELTA;
    let a = p_f[(1, 1)] * d * d / 36.0;
    let col = a_k.tr_mul_vec(&p_f.mul_vec(&[0.0, 1.0]));
    let b = d * linalg::norm2(&col) / 3.0;
    let reported = |s: f64| 1.0 - b * s - s * s;
    let x_star = bisect(reported, 0.0, 2.0, 1e-10);
    let x_lower = bisect(reported, -2.0, 0.0, 1e-10);
    let bracket = |s: f64| 1.0 - b * s * s - a * s.powi(4);
    let mut hi = 1.0;
    while bracket(hi) > 0.0 {
        hi *= 2.0;
    }
    let bracket_root = bisect(bracket, 0.0, hi, 1e-10);
    let c_f = linalg::min_singular_value(&p_f) / 8.0;
    Ok(PendulumConstants { p_f, a, b, x_star, x_lower, bracket_root, c_f })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlyap_trivial_cases() {
        let p = dlyap_solve(&Mat::zeros(2, 2), &Mat::identity(2)).unwrap();
        assert!(p.max_abs_diff(&Mat::identity(2)) < 1e-14);

        let a = Mat::diag(&[0.5, 0.5]);
        let p = dlyap_solve(&a, &Mat::identity(2)).unwrap();
        assert!(p.max_abs_diff(&Mat::diag(&[4.0 / 3.0, 4.0 / 3.0])) < 1e-14);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        assert!(matches!(
            dlyap_solve(&Mat::identity(2), &Mat::identity(2)),
            Err(Error::NoSolution(_))
        ));
        let a = Mat::from_rows(&[&[1.2, 0.0], &[0.0, 0.3]]);
        assert!(matches!(dlyap_solve(&a, &Mat::identity(2)), Err(Error::NoSolution(_))));
    }

    #[test]
    fn dlyap_pendulum_design() {
        let k = pendulum_terminal_constants().unwrap();
        let expected = Mat::from_rows(&[&[31.133, 10.196], &[10.196, 10.311]]);
        assert!(k.p_f.max_abs_diff(&expected) < 1e-3);
        let lf = pendulum_linear_feedback();
        let cost = QuadraticCost::new(Mat::identity(2), Mat::identity(1)).unwrap();
        let c = lf.closed_loop_cost(&cost).scale(2.0);
        assert!(dlyap_residual(&lf.closed_loop(), &k.p_f, &c) <= 1e-10);
        assert!(k.p_f.asymmetry() <= 1e-12);
        assert!(eigenvalues_2x2(&k.p_f).iter().all(|e| e.re > 0.0));
    }

    #[test]
    fn dlyap_residual_on_random_stable_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=5 {
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
            }
            let rho = linalg::spectral_radius(&a);
            let a = a.scale(0.9 / rho.max(1e-3));
            let c = Mat::identity(n);
            let p = dlyap_solve(&a, &c).unwrap();
            assert!(dlyap_residual(&a, &p, &c) <= 1e-10);
        }
    }

    #[test]
    fn eigenvalue_examples() {
        let ak = Mat::from_rows(&[&[1.0, 0.1], &[-0.9, 0.0]]);
        let [l1, l2] = eigenvalues_2x2(&ak);
        assert!((l1.re - 0.9).abs() < 1e-12 && (l2.re - 0.1).abs() < 1e-12);
        assert_eq!(l1.im, 0.0);

        let [l1, l2] = eigenvalues_2x2(&Mat::identity(2));
        assert_eq!((l1.re, l2.re), (1.0, 1.0));

        let rot = Mat::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let [l1, l2] = eigenvalues_2x2(&rot);
        assert!(l1.re.abs() < 1e-15 && (l1.im - 1.0).abs() < 1e-15);
        assert!(l2.re.abs() < 1e-15 && (l2.im + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pendulum_constants_match_design() {
        let k = pendulum_terminal_constants().unwrap();
        assert!((k.a - 2.8643e-3).abs() < 1e-6, "a = {}", k.a);
        assert!((k.b - 0.045675).abs() < 1e-5, "b = {}", k.b);
        assert!((k.x_star - 0.9774).abs() < 1e-3, "x* = {}", k.x_star);
        assert!((k.x_lower + 1.0231).abs() < 1e-3, "x_* = {}", k.x_lower);
        assert!(k.bracket_root > k.x_star);
        assert!(1.0 / (2.0 * 2f64.sqrt()) < k.x_star);
    }

    #[test]
    fn pendulum_linearization_is_stabilized() {
        let lf = pendulum_linear_feedback();
        assert!(lf.is_stabilizing());
        let ak = lf.closed_loop();
        assert!(ak.max_abs_diff(&Mat::from_rows(&[&[1.0, 0.1], &[-0.9, 0.0]])) < 1e-15);
    }
}
