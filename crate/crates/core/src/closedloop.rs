//! The mismatched closed loop `x⁺ = f(x, κ_N(x), θ)` and sample-based
//! certification of robust versus strong stability.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::compfn::JointComparisonFn;
use crate::error::{invalid, Error, Result};
use crate::linalg::{norm2, stacked_norm};
use crate::model::ParametricSystem;
use crate::ocp::{InputSequence, MpcProblem, OcpSolution, OcpSolver};

/// Default tolerance on `V_N⁰(f_c) ≤ ρ` in invariance checks.
pub const RPI_TOL: f64 = 1e-8;

/// A problem paired with the strategy that solves it.
#[derive(Clone, Copy)]
pub struct Controller<'a> {
    pub prob: &'a MpcProblem,
    pub solver: &'a dyn OcpSolver,
}

impl fmt::Debug for Controller<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Controller({}, {})", self.prob.system().name(), self.solver.name())
    }
}

impl<'a> Controller<'a> {
    pub fn new(prob: &'a MpcProblem, solver: &'a dyn OcpSolver) -> Self {
        Self { prob, solver }
    }

    pub fn solve(&self, x: &[f64], warm: Option<&InputSequence>) -> Result<OcpSolution> {
        self.solver.solve(self.prob, x, warm)
    }

    /// `V_N⁰(x)`, `∞` when infeasible or not computable.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.solve(x, None).map_or(f64::INFINITY, |s| s.optimal_value())
    }
}

/// Parameter vectors `θ = base + Σ t_i e_{free_i}`; radii are measured over
/// the free coordinates only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaSpace {
    pub base: Vec<f64>,
    pub free: Vec<usize>,
}

impl ThetaSpace {
    pub fn new(base: Vec<f64>, free: Vec<usize>) -> Result<Self> {
        if free.is_empty() || free.iter().any(|i| *i >= base.len()) {
            return Err(invalid("theta space: free indices must lie inside the parameter vector"));
        }
        Ok(Self { base, free })
    }

    /// All coordinates free around zero.
    pub fn full(n_theta: usize) -> Self {
        Self { base: vec![0.0; n_theta], free: (0..n_theta).collect() }
    }

    pub fn free_dim(&self) -> usize {
        self.free.len()
    }

    pub fn embed(&self, t: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (i, v) in self.free.iter().zip(t) {
            theta[*i] += v;
        }
        theta
    }

    pub fn radius(&self, theta: &[f64]) -> f64 {
        self.free.iter().map(|i| (theta[*i] - self.base[*i]).powi(2)).sum::<f64>().sqrt()
    }

    /// Points with radius exactly `r`: `±r` in one dimension, `count`
    /// equally spaced angles in two, seeded random directions beyond.
    pub fn shell(&self, r: f64, count: usize) -> Vec<Vec<f64>> {
        match self.free_dim() {
            1 => {
                if r == 0.0 {
                    vec![self.embed(&[0.0])]
                } else {
                    vec![self.embed(&[-r]), self.embed(&[r])]
                }
            }
            2 => (0..count.max(1))
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / count.max(1) as f64;
                    self.embed(&[r * a.cos(), r * a.sin()])
                })
                .collect(),
            d => {
                let mut rng = ChaCha8Rng::seed_from_u64(count as u64);
                (0..count.max(1))
                    .map(|_| {
                        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let n = norm2(&v).max(1e-300);
                        self.embed(&v.iter().map(|c| r * c / n).collect::<Vec<_>>())
                    })
                    .collect()
            }
        }
    }

    /// Tensor grid on `[-r, r]^d` restricted to the ball of radius `r`.
    pub fn ball_grid(&self, r: f64, per_axis: usize) -> Vec<Vec<f64>> {
        let d = self.free_dim();
        let per_axis = per_axis.max(2);
        let axis: Vec<f64> =
            (0..per_axis).map(|i| -r + 2.0 * r * i as f64 / (per_axis - 1) as f64).collect();
        let total = per_axis.pow(d as u32);
        let mut out = Vec::new();
        for idx in 0..total {
            let mut rem = idx;
            let mut t = vec![0.0; d];
            for c in t.iter_mut().rev() {
                *c = axis[rem % per_axis];
                rem /= per_axis;
            }
            if norm2(&t) <= r * (1.0 + 1e-12) {
                out.push(self.embed(&t));
            }
        }
        out
    }

    /// Uniform random sample of the ball of radius `r`.
    pub fn sample_ball(&self, r: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = self.free_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let t: Vec<f64> = (0..d).map(|_| rng.gen_range(-r..=r)).collect();
            if norm2(&t) <= r {
                out.push(self.embed(&t));
            }
        }
        out
    }
}

/// Axis-aligned state box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(invalid("state box needs lo < hi in every coordinate"));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn diameter(&self) -> f64 {
        let d: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect();
        norm2(&d)
    }

    /// Tensor grid with `per_axis` points per coordinate, first coordinate slowest.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let per_axis = per_axis.max(2);
        let n = self.dim();
        let total = per_axis.pow(n as u32);
        (0..total)
            .map(|idx| {
                let mut rem = idx;
                let mut x = vec![0.0; n];
                for i in (0..n).rev() {
                    let j = rem % per_axis;
                    rem /= per_axis;
                    x[i] = self.lo[i] + (self.hi[i] - self.lo[i]) * j as f64 / (per_axis - 1) as f64;
                }
                x
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect()
    }
}

/// Constant parameter sequence of length `k`.
pub fn constant_theta(theta: &[f64], k: usize) -> Vec<Vec<f64>> {
    vec![theta.to_vec(); k]
}

/// Independent per-step draws from the ball of radius `r` in `space`.
pub fn random_theta(space: &ThetaSpace, r: f64, k: usize, seed: u64) -> Vec<Vec<f64>> {
    space.sample_ball(r, k, seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopRun {
    pub theta_seq: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// `V_N⁰(states[k])`, `∞` where the OCP was infeasible.
    pub values: Vec<f64>,
    /// `values[k+1] − values[k]`, `∞` after an infeasible successor.
    pub delta_v: Vec<f64>,
    pub escaped: bool,
}

impl ClosedLoopRun {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("runs contain the initial state")
    }

    pub fn norms(&self) -> Vec<f64> {
        self.states.iter().map(|x| norm2(x)).collect()
    }

    /// Whether `|x(k)| < tol` for some `k` and the run did not escape.
    pub fn converged(&self, tol: f64) -> bool {
        !self.escaped && self.norms().iter().any(|v| *v < tol)
    }
}

/// Simulates the plant under the MPC law for `theta_seq.len()` steps,
/// warm-starting each solve from the previous solution.
pub fn run_closed_loop(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x0: &[f64],
    theta_seq: &[Vec<f64>],
    escape_radius: f64,
) -> Result<ClosedLoopRun> {
    let mut sol = ctrl.solve(x0, None)?;
    if !sol.feasible {
        return Err(Error::InfeasibleStart(format!("OCP is infeasible at x0 = {x0:?}")));
    }
    let mut run = ClosedLoopRun {
        theta_seq: Vec::with_capacity(theta_seq.len()),
        states: vec![x0.to_vec()],
        inputs: Vec::new(),
        values: vec![sol.value],
        delta_v: Vec::new(),
        escaped: false,
    };
    for theta in theta_seq {
        let x = run.final_state().to_vec();
        let u = sol.first_input().to_vec();
        let next = plant.step(&x, &u, theta)?;
        run.theta_seq.push(theta.clone());
        run.inputs.push(u);
        let blown = next.iter().any(|v| !v.is_finite()) || norm2(&next) > escape_radius;
        run.states.push(next.clone());
        if blown {
            run.values.push(f64::INFINITY);
            run.delta_v.push(f64::INFINITY);
            run.escaped = true;
            break;
        }
        let warm = ctrl.prob.warm_start(&sol)?;
        sol = ctrl.solve(&next, Some(&warm))?;
        let v = sol.optimal_value();
        let prev = *run.values.last().expect("nonempty");
        run.values.push(v);
        run.delta_v.push(if v.is_finite() { v - prev } else { f64::INFINITY });
        if !sol.feasible {
            run.escaped = true;
            break;
        }
    }
    Ok(run)
}

/// One evaluation of the cost difference at `(x, θ)`.
#[derive(Debug, Clone)]
pub struct DescentSample {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub value: f64,
    pub successor: Vec<f64>,
    pub successor_value: f64,
}

impl DescentSample {
    /// `V(f_c(x,θ)) − V(x)`: `∞` for an infeasible successor, NaN when `x`
    /// itself is infeasible.
    pub fn delta_v(&self) -> f64 {
        if !self.value.is_finite() {
            f64::NAN
        } else if !self.successor_value.is_finite() {
            f64::INFINITY
        } else {
            self.successor_value - self.value
        }
    }
}

/// The solution at `x` and the cost difference for each `θ`, solving at the
/// successor warm-started from `ũ(x)`.
fn descent_row(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x: &[f64],
    thetas: &[Vec<f64>],
) -> Result<Vec<DescentSample>> {
    let sol = ctrl.solve(x, None)?;
    let value = sol.optimal_value();
    let mut out = Vec::with_capacity(thetas.len());
    let warm = if sol.feasible { Some(ctrl.prob.warm_start(&sol)?) } else { None };
    for theta in thetas {
        let (successor, successor_value) = if sol.feasible {
            let next = plant.step(x, sol.first_input(), theta)?;
            let v = if next.iter().all(|v| v.is_finite()) {
                ctrl.solve(&next, warm.as_ref()).map_or(f64::INFINITY, |s| s.optimal_value())
            } else {
                f64::INFINITY
            };
            (next, v)
        } else {
            (vec![f64::NAN; x.len()], f64::INFINITY)
        };
        out.push(DescentSample {
            x: x.to_vec(),
            theta: theta.clone(),
            value,
            successor,
            successor_value,
        });
    }
    Ok(out)
}

/// Same as [`descent_row`] with a user-supplied Lyapunov candidate in place
/// of `V_N⁰`; the controller still supplies `κ_N`.
fn candidate_row(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    lyap: &LyapunovFn,
    x: &[f64],
    thetas: &[Vec<f64>],
) -> Result<Vec<DescentSample>> {
    let sol = ctrl.solve(x, None)?;
    let value = if sol.feasible { lyap(x) } else { f64::INFINITY };
    let mut out = Vec::with_capacity(thetas.len());
    for theta in thetas {
        let (successor, successor_value) = if sol.feasible {
            let next = plant.step(x, sol.first_input(), theta)?;
            let v = if next.iter().all(|v| v.is_finite()) { lyap(&next) } else { f64::INFINITY };
            (next, v)
        } else {
            (vec![f64::NAN; x.len()], f64::INFINITY)
        };
        out.push(DescentSample { x: x.to_vec(), theta: theta.clone(), value, successor, successor_value });
    }
    Ok(out)
}

pub type LyapunovFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Which function certification tracks along the closed loop.
#[derive(Clone, Default)]
pub enum Lyapunov {
    /// The optimal value function `V_N⁰`.
    #[default]
    ValueFunction,
    Candidate { label: String, v: Arc<LyapunovFn> },
}

impl fmt::Debug for Lyapunov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Lyapunov {
    pub fn candidate(label: impl Into<String>, v: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::Candidate { label: label.into(), v: Arc::new(v) }
    }

    pub fn label(&self) -> String {
        match self {
            Self::ValueFunction => "V_N^0".into(),
            Self::Candidate { label, .. } => label.clone(),
        }
    }

    pub fn eval(&self, ctrl: &Controller<'_>, x: &[f64]) -> f64 {
        match self {
            Self::ValueFunction => ctrl.value(x),
            Self::Candidate { v, .. } => v(x),
        }
    }

    fn rows(
        &self,
        ctrl: &Controller<'_>,
        plant: &ParametricSystem,
        xs: &[Vec<f64>],
        thetas: &[Vec<f64>],
    ) -> Result<Vec<Vec<DescentSample>>> {
        xs.par_iter()
            .map(|x| match self {
                Self::ValueFunction => descent_row(ctrl, plant, x, thetas),
                Self::Candidate { v, .. } => candidate_row(ctrl, plant, v.as_ref(), x, thetas),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostDifferenceField {
    pub x_points: Vec<Vec<f64>>,
    pub theta_points: Vec<Vec<f64>>,
    /// `dv[i][j] = ΔV(x_points[i], theta_points[j])`
    pub dv: Vec<Vec<f64>>,
    /// Both `x` and its successor feasible.
    pub feasible: Vec<Vec<bool>>,
}

/// `ΔV(x,θ) = V_N⁰(f_c(x,θ)) − V_N⁰(x)` on every grid cell.
pub fn cost_difference_field(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x_points: &[Vec<f64>],
    theta_points: &[Vec<f64>],
) -> Result<CostDifferenceField> {
    if x_points.iter().chain(theta_points).flatten().any(|v| !v.is_finite()) {
        return Err(invalid("cost_difference_field: grids must be finite"));
    }
    let rows = Lyapunov::ValueFunction.rows(ctrl, plant, x_points, theta_points)?;
    let dv = rows.iter().map(|r| r.iter().map(DescentSample::delta_v).collect()).collect();
    let feasible = rows.iter().map(|r| r.iter().map(|s| s.delta_v().is_finite()).collect()).collect();
    Ok(CostDifferenceField {
        x_points: x_points.to_vec(),
        theta_points: theta_points.to_vec(),
        dv,
        feasible,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RpiReport {
    pub passed: bool,
    pub x_samples: usize,
    pub theta_samples: usize,
    /// Largest `V_N⁰(f_c(x,θ)) − ρ` seen.
    pub worst_excess: f64,
    pub worst_x: Vec<f64>,
    pub worst_theta: Vec<f64>,
}

/// Checks `V(f_c(x,θ)) ≤ ρ` for sampled `x ∈ lev_ρ V` (rejection from
/// `bounds`) and `θ` on the `δ`-shell plus an interior grid.
#[allow(clippy::too_many_arguments)]
pub fn rpi_check(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    lyap: &Lyapunov,
    space: &ThetaSpace,
    bounds: &StateBox,
    rho: f64,
    delta: f64,
    samples: usize,
    seed: u64,
) -> Result<RpiReport> {
    if !(rho > 0.0) {
        return Err(invalid("rpi_check: rho must be positive"));
    }
    if !(delta >= 0.0) {
        return Err(invalid("rpi_check: delta must be nonnegative"));
    }
    let xs = sample_sublevel(ctrl, lyap, bounds, rho, samples, seed)?;
    let mut thetas = space.shell(delta, 16);
    if delta > 0.0 {
        thetas.extend(space.ball_grid(delta, 5));
    }
    let rows = lyap.rows(ctrl, plant, &xs, &thetas)?;
    let mut report = RpiReport {
        passed: true,
        x_samples: xs.len(),
        theta_samples: thetas.len(),
        worst_excess: f64::NEG_INFINITY,
        worst_x: vec![],
        worst_theta: vec![],
    };
    for s in rows.iter().flatten() {
        let excess = s.successor_value - rho;
        if excess > report.worst_excess || report.worst_x.is_empty() {
            report.worst_excess = excess;
            report.worst_x = s.x.clone();
            report.worst_theta = s.theta.clone();
        }
    }
    report.passed = report.worst_excess <= RPI_TOL;
    Ok(report)
}

/// `count` points of `lev_ρ V` by rejection sampling over `bounds`.
pub fn sample_sublevel(
    ctrl: &Controller<'_>,
    lyap: &Lyapunov,
    bounds: &StateBox,
    rho: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let batch = count.max(1) * 4;
    let mut drawn = 0usize;
    while out.len() < count {
        if drawn > 200 * count.max(1) {
            return Err(Error::Inconclusive(format!(
                "found only {} of {count} samples of the level set {rho} in the state box",
                out.len()
            )));
        }
        let cands: Vec<Vec<f64>> = (0..batch).map(|_| bounds.sample(&mut rng)).collect();
        drawn += batch;
        let keep: Vec<bool> = cands.par_iter().map(|x| lyap.eval(ctrl, x) <= rho).collect();
        out.extend(cands.into_iter().zip(keep).filter(|(_, k)| *k).map(|(x, _)| x).take(count - out.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StabilityVerdict {
    #[serde(rename = "SES")]
    Ses,
    #[serde(rename = "SAS")]
    Sas,
    #[serde(rename = "RAS-only")]
    RasOnly,
    #[serde(rename = "unstable")]
    Unstable,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl fmt::Display for StabilityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ses => "SES",
            Self::Sas => "SAS",
            Self::RasOnly => "RAS-only",
            Self::Unstable => "unstable",
            Self::Inconclusive => "inconclusive",
        })
    }
}

/// Inputs to [`descent_certification`].
#[derive(Debug, Clone)]
pub struct CertificationSetup<'a> {
    pub rho: f64,
    /// Radius the `θ` samples were drawn from (reported only).
    pub delta: f64,
    pub x_samples: &'a [Vec<f64>],
    pub theta_samples: &'a [Vec<f64>],
    pub alpha3: &'a crate::compfn::ScalarComparisonFn,
    /// Quadratic costs: a positive margin certifies exponential stability.
    pub quadratic_track: bool,
    pub lyapunov: &'a Lyapunov,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub rho: f64,
    pub delta_tested: f64,
    pub lyapunov: String,
    pub rpi_ok: bool,
    /// `min −ΔV(x,θ)/α₃(|x|)` over sampled `x ≠ 0` in `lev_ρ V` and all `θ`.
    pub descent_margin: f64,
    /// Largest `ΔV(x,θ)` over sampled `x ≠ 0`.
    pub max_increase: f64,
    pub worst_x: Vec<f64>,
    pub worst_theta: Vec<f64>,
    pub samples_used: usize,
    /// Samples outside `lev_ρ V` or with infeasible OCP.
    pub samples_excluded: usize,
    pub lyap_increase_fit: Option<GammaVFit>,
    pub scaling: Option<crate::compfn::ScalingReport>,
    pub verdict: StabilityVerdict,
}

/// Samples the one-step change of the Lyapunov function and classifies the
/// closed loop on `lev_ρ V`.
pub fn descent_certification(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    setup: &CertificationSetup<'_>,
) -> Result<CertificationReport> {
    if !(setup.rho > 0.0) {
        return Err(invalid("descent_certification: rho must be positive"));
    }
    let rows = setup.lyapunov.rows(ctrl, plant, setup.x_samples, setup.theta_samples)?;
    let mut report = CertificationReport {
        rho: setup.rho,
        delta_tested: setup.delta,
        lyapunov: setup.lyapunov.label(),
        rpi_ok: true,
        descent_margin: f64::INFINITY,
        max_increase: f64::NEG_INFINITY,
        worst_x: vec![],
        worst_theta: vec![],
        samples_used: 0,
        samples_excluded: 0,
        lyap_increase_fit: None,
        scaling: None,
        verdict: StabilityVerdict::Inconclusive,
    };
    for row in &rows {
        let Some(first) = row.first() else { continue };
        if !(first.value <= setup.rho) {
            report.samples_excluded += 1;
            continue;
        }
        report.samples_used += 1;
        let s = norm2(&first.x);
        for sample in row {
            if !(sample.successor_value <= setup.rho + RPI_TOL) {
                report.rpi_ok = false;
            }
            if s == 0.0 {
                continue;
            }
            let dv = sample.delta_v();
            let a = setup.alpha3.eval(s);
            let margin = if a > 0.0 { -dv / a } else { f64::NEG_INFINITY };
            if dv > report.max_increase {
                report.max_increase = dv;
            }
            if margin < report.descent_margin || report.worst_x.is_empty() {
                report.descent_margin = margin;
                report.worst_x = sample.x.clone();
                report.worst_theta = sample.theta.clone();
            }
        }
    }
    report.verdict = if report.samples_used == 0 || report.worst_x.is_empty() {
        StabilityVerdict::Inconclusive
    } else if !report.rpi_ok {
        StabilityVerdict::Unstable
    } else if report.descent_margin > 0.0 {
        if setup.quadratic_track {
            StabilityVerdict::Ses
        } else {
            StabilityVerdict::Sas
        }
    } else if report.max_increase >= 0.0 {
        StabilityVerdict::RasOnly
    } else {
        StabilityVerdict::Inconclusive
    };
    Ok(report)
}

/// Empirical supremum of `δ ∈ [0, delta_max]` with a positive descent
/// margin, by bisection; `θ` samples come from `thetas(δ)`.
pub fn bisect_delta(
    delta_max: f64,
    iterations: usize,
    mut certify: impl FnMut(f64) -> Result<CertificationReport>,
) -> Result<f64> {
    let strong = |r: &CertificationReport| {
        matches!(r.verdict, StabilityVerdict::Ses | StabilityVerdict::Sas)
    };
    if strong(&certify(delta_max)?) {
        return Ok(delta_max);
    }
    let (mut lo, mut hi) = (0.0, delta_max);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if strong(&certify(mid)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Tabulated bound on the mismatch perturbation of the Lyapunov function.
#[derive(Debug, Clone, Serialize)]
pub struct GammaVFit {
    /// `|θ|` shell radii, increasing.
    pub shells: Vec<f64>,
    /// Quadratic track: `max d(x,θ)/|x|²` on each shell.
    pub shell_max: Vec<f64>,
    /// Running maximum of `shell_max`, so `γ_V(s,t) = σ_V(t)s²` bounds all `|θ| ≤ t`.
    pub sigma: Vec<f64>,
    /// General track: `|x|` breakpoints and the envelope table `[s][t]`.
    pub s_points: Vec<f64>,
    pub table: Vec<Vec<f64>>,
    pub quadratic: bool,
}

impl GammaVFit {
    /// `σ_V(t)`, linearly interpolated between shells and down to `σ_V(0) = 0`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        interp_shells(&self.shells, &self.sigma, t)
    }

    pub fn to_joint(&self) -> JointComparisonFn {
        let fit = self.clone();
        if self.quadratic {
            JointComparisonFn::new("sigma_V(t)*s^2", move |s, t| fit.sigma_at(t) * s * s)
        } else {
            JointComparisonFn::new("tabulated envelope", move |s, t| {
                let col: Vec<f64> = fit.table.iter().map(|row| interp_shells(&fit.shells, row, t)).collect();
                interp(&fit.s_points, &col, s)
            })
        }
    }
}

/// Interpolation in `|θ|` with the envelope pinned to zero at `θ = 0`.
fn interp_shells(shells: &[f64], ys: &[f64], t: f64) -> f64 {
    match shells.first() {
        Some(&t0) if t0 > 0.0 && t < t0 => ys[0] * t.max(0.0) / t0,
        _ => interp(shells, ys, t),
    }
}

/// Piecewise-linear interpolation, clamped at the ends.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    for i in 1..xs.len() {
        if x <= xs[i] {
            let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            return ys[i - 1] + w * (ys[i] - ys[i - 1]);
        }
    }
    *ys.last().expect("nonempty")
}

/// `d(x,θ) = |V_N(f_c(x,θ), ũ(x)) − V_N(f̂_c(x), ũ(x))|`; `None` when the
/// OCP at `x` is infeasible.
pub fn warm_start_perturbation(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x: &[f64],
    theta: &[f64],
) -> Result<Option<f64>> {
    let sol = ctrl.solve(x, None)?;
    if !sol.feasible {
        return Ok(None);
    }
    let warm = ctrl.prob.warm_start(&sol)?;
    let u = sol.first_input();
    let actual = plant.step(x, u, theta)?;
    let nominal = ctrl.prob.system().model_step(x, u)?;
    let a = ctrl.prob.objective(&actual, &warm).map_or(f64::INFINITY, |r| r.value);
    let b = ctrl.prob.objective(&nominal, &warm)?.value;
    Ok(Some((a - b).abs()))
}

/// Groups `θ` samples by shell radius and returns the per-shell maxima of
/// `score(x, θ)` over the `x` samples.
fn shell_envelope(
    x_samples: &[Vec<f64>],
    shells: &[(f64, Vec<Vec<f64>>)],
    score: impl Fn(&[f64], &[f64]) -> Result<Option<f64>> + Sync,
) -> Result<Vec<Vec<Option<f64>>>> {
    // table[i][j]: max over the j-th shell at the i-th x sample.
    x_samples
        .par_iter()
        .map(|x| {
            shells
                .iter()
                .map(|(_, thetas)| {
                    let mut best: Option<f64> = None;
                    for th in thetas {
                        if let Some(v) = score(x, th)? {
                            best = Some(best.map_or(v, |b| b.max(v)));
                        }
                    }
                    Ok(best)
                })
                .collect()
        })
        .collect()
}

/// Least upper envelope of the warm-start perturbation `d(x,θ)`: per `|θ|`
/// shell over the `x` samples (divided by `|x|²` on the quadratic track).
pub fn fit_gamma_v(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x_samples: &[Vec<f64>],
    shells: &[(f64, Vec<Vec<f64>>)],
    quadratic: bool,
) -> Result<GammaVFit> {
    if shells.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(invalid("fit_gamma_v: shell radii must be increasing"));
    }
    let table = shell_envelope(x_samples, shells, |x, th| {
        let s = norm2(x);
        Ok(warm_start_perturbation(ctrl, plant, x, th)?.map(|d| {
            if quadratic {
                if s > 0.0 {
                    d / (s * s)
                } else {
                    0.0
                }
            } else {
                d
            }
        }))
    })?;
    Ok(assemble_fit(x_samples, shells, &table, quadratic))
}

fn assemble_fit(
    x_samples: &[Vec<f64>],
    shells: &[(f64, Vec<Vec<f64>>)],
    table: &[Vec<Option<f64>>],
    quadratic: bool,
) -> GammaVFit {
    let radii: Vec<f64> = shells.iter().map(|(t, _)| *t).collect();
    let shell_max: Vec<f64> = (0..shells.len())
        .map(|j| table.iter().filter_map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    let sigma = running_max(&shell_max);
    let (s_points, env) = if quadratic {
        (vec![], vec![])
    } else {
        // Cumulative maximum over |x| ≤ s and |θ| ≤ t keeps the table monotone.
        let mut s_points: Vec<f64> = x_samples.iter().map(|x| norm2(x)).collect();
        s_points.sort_by(f64::total_cmp);
        s_points.dedup();
        let env: Vec<Vec<f64>> = s_points
            .iter()
            .map(|&s| {
                let raw: Vec<f64> = (0..shells.len())
                    .map(|j| {
                        x_samples
                            .iter()
                            .zip(table)
                            .filter(|(x, _)| norm2(x) <= s)
                            .filter_map(|(_, row)| row[j])
                            .fold(0.0, f64::max)
                    })
                    .collect();
                running_max(&raw)
            })
            .collect();
        (s_points, env)
    };
    GammaVFit { shells: radii, shell_max, sigma, s_points, table: env, quadratic }
}

fn running_max(v: &[f64]) -> Vec<f64> {
    let mut acc = f64::NEG_INFINITY;
    v.iter()
        .map(|x| {
            acc = acc.max(*x);
            acc
        })
        .collect()
}

/// Envelope of `|V(f_c(x,θ)) − V(f̂_c(x))| / |x|²` per `|θ|` shell for an
/// explicit Lyapunov candidate `V`.
pub fn lyapunov_increase_envelope(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    v: &LyapunovFn,
    x_samples: &[Vec<f64>],
    shells: &[(f64, Vec<Vec<f64>>)],
) -> Result<GammaVFit> {
    let table = shell_envelope(x_samples, shells, |x, th| {
        let s = norm2(x);
        if s == 0.0 {
            return Ok(Some(0.0));
        }
        let sol = ctrl.solve(x, None)?;
        if !sol.feasible {
            return Ok(None);
        }
        let u = sol.first_input();
        let actual = plant.step(x, u, th)?;
        let nominal = ctrl.prob.system().model_step(x, u)?;
        Ok(Some((v(&actual) - v(&nominal)).abs() / (s * s)))
    })?;
    Ok(assemble_fit(x_samples, shells, &table, true))
}

/// `V_N⁰(f_c) − [V_N⁰(x) − ℓ(x,κ_N(x)) + V_N(f_c,ũ) − V_N(f̂_c,ũ)]`, the
/// residual of the robust descent inequality; `None` unless both `x` and the
/// perturbed warm start are feasible.
pub fn robust_descent_residual(
    ctrl: &Controller<'_>,
    plant: &ParametricSystem,
    x: &[f64],
    theta: &[f64],
) -> Result<Option<f64>> {
    let prob = ctrl.prob;
    let sol = ctrl.solve(x, None)?;
    if !sol.feasible {
        return Ok(None);
    }
    let warm = prob.warm_start(&sol)?;
    let u = sol.first_input();
    let actual = plant.step(x, u, theta)?;
    if !prob.feasible(&actual, &warm) {
        return Ok(None);
    }
    let nominal = prob.system().model_step(x, u)?;
    let next = ctrl.solve(&actual, Some(&warm))?;
    let lhs = next.optimal_value();
    let rhs = sol.value - prob.cost().eval(x, u) + prob.objective(&actual, &warm)?.value
        - prob.objective(&nominal, &warm)?.value;
    Ok(Some(lhs - rhs))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelErrorReport {
    pub shells: Vec<f64>,
    /// `e(t) = max |f − f̂| / |(x,u)|` over the samples, per shell.
    pub envelope: Vec<f64>,
    /// The same ratio at `θ = 0`.
    pub at_zero: f64,
    /// Largest ratio over the smallest-radius samples divided by the largest
    /// over radii ≥ `1e-2`; large values mean the ratio blows up at the origin.
    pub small_scale_growth: f64,
    pub finite: bool,
    /// Finite, zero at `θ = 0`, and no blow-up at the origin.
    pub c1_track_ok: bool,
    /// Joint envelope `max |f − f̂|` over `|(x,u)| ≤ s` and shell `t`.
    pub s_points: Vec<f64>,
    pub joint: Vec<Vec<f64>>,
    /// The joint envelope vanishes along both axes.
    pub continuity_track_ok: bool,
}

const SMALL_SCALE_GROWTH_LIMIT: f64 = 10.0;

/// Samples `|f(x,u,θ) − f̂(x,u)|` against `|(x,u)|` on a box plus radial
/// probes toward the origin along each axis and random directions.
#[allow(clippy::too_many_arguments)]
pub fn model_error_bounds_check(
    plant: &ParametricSystem,
    x_box: &StateBox,
    u_box: &StateBox,
    shells: &[(f64, Vec<Vec<f64>>)],
    box_samples: usize,
    seed: u64,
) -> Result<ModelErrorReport> {
    let (n, m) = (plant.n(), plant.m());
    if x_box.dim() != n || u_box.dim() != m {
        return Err(invalid("model_error_bounds_check: box dimensions do not match the plant"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(Vec<f64>, Vec<f64>)> =
        (0..box_samples).map(|_| (x_box.sample(&mut rng), u_box.sample(&mut rng))).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n + m {
        for sgn in [-1.0, 1.0] {
            let mut d = vec![0.0; n + m];
            d[i] = sgn;
            dirs.push(d);
        }
    }
    for _ in 0..8 {
        let v: Vec<f64> = (0..n + m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nv = norm2(&v).max(1e-300);
        dirs.push(v.iter().map(|c| c / nv).collect());
    }
    let radii: Vec<f64> = (0..=14).map(|k| 10f64.powi(-(k as i32) / 2) * 0.5).collect();
    let r_min = *radii.last().expect("nonempty");
    for d in &dirs {
        for r in &radii {
            let z: Vec<f64> = d.iter().map(|c| c * r).collect();
            points.push((z[..n].to_vec(), z[n..].to_vec()));
        }
    }
    points.retain(|(x, u)| stacked_norm(x, u) > 0.0);

    let err = |x: &[f64], u: &[f64], th: &[f64]| -> Result<f64> {
        let a = plant.step(x, u, th)?;
        let b = plant.model_step(x, u)?;
        Ok(a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
    };
    let zero = vec![0.0; plant.n_theta()];
    // Per point: (|(x,u)|, error per shell)
    let evaluated: Vec<(f64, Vec<f64>, f64)> = points
        .par_iter()
        .map(|(x, u)| {
            let s = stacked_norm(x, u);
            let per_shell = shells
                .iter()
                .map(|(_, ths)| {
                    ths.iter().try_fold(0.0f64, |acc, th| Ok::<_, Error>(acc.max(err(x, u, th)?)))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((s, per_shell, err(x, u, &zero)?))
        })
        .collect::<Result<_>>()?;

    let envelope: Vec<f64> = (0..shells.len())
        .map(|j| evaluated.iter().map(|(s, e, _)| e[j] / s).fold(0.0, f64::max))
        .collect();
    let at_zero = evaluated.iter().map(|(s, _, e0)| e0 / s).fold(0.0, f64::max);
    let ratio_max = |keep: &dyn Fn(f64) -> bool| {
        evaluated
            .iter()
            .filter(|(s, _, _)| keep(*s))
            .flat_map(|(s, e, _)| e.iter().map(move |v| v / s))
            .fold(0.0, f64::max)
    };
    let small = ratio_max(&|s| s <= r_min * (1.0 + 1e-9));
    let reference = ratio_max(&|s| s >= 1e-2);
    let small_scale_growth = if reference > 0.0 {
        small / reference
    } else if small > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let finite = envelope.iter().all(|v| v.is_finite()) && at_zero.is_finite();

    let mut s_points: Vec<f64> = radii.iter().rev().copied().collect();
    s_points.push(evaluated.iter().map(|(s, _, _)| *s).fold(0.0, f64::max));
    s_points.dedup();
    let joint: Vec<Vec<f64>> = s_points
        .iter()
        .map(|&smax| {
            let raw: Vec<f64> = (0..shells.len())
                .map(|j| {
                    evaluated
                        .iter()
                        .filter(|(s, _, _)| *s <= smax * (1.0 + 1e-9))
                        .map(|(_, e, _)| e[j])
                        .fold(0.0, f64::max)
                })
                .collect();
            running_max(&raw)
        })
        .collect();
    // Vanishing along s: the smallest-radius row is small relative to the largest.
    let top = joint.last().and_then(|r| r.last()).copied().unwrap_or(0.0);
    let bottom = joint.first().and_then(|r| r.last()).copied().unwrap_or(0.0);
    let vanishes_in_s = bottom <= 1e-3 * top.max(1e-300) || bottom < 1e-6;
    let vanishes_in_t = at_zero <= 1e-12;
    Ok(ModelErrorReport {
        shells: shells.iter().map(|(t, _)| *t).collect(),
        envelope,
        at_zero,
        small_scale_growth,
        finite,
        c1_track_ok: finite && vanishes_in_t && small_scale_growth <= SMALL_SCALE_GROWTH_LIMIT,
        s_points,
        joint,
        continuity_track_ok: finite && vanishes_in_t && vanishes_in_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub c: f64,
    pub lambda: f64,
    /// Largest violation of the least-squares bound before adjusting `c`.
    pub residual: f64,
    /// `λ < 1` and the second half of the data decays at least half as fast
    /// as the whole.
    pub converging: bool,
}

const FIT_FLOOR: f64 = 1e-10;

fn least_squares_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Fits `|x(k)| ≤ c·|x(0)|·λᵏ` to a run.
pub fn exponential_fit(run: &ClosedLoopRun) -> Result<ExponentialFit> {
    if run.escaped {
        return Err(Error::Inconclusive("cannot fit an escaped run".into()));
    }
    let norms = run.norms();
    let x0 = norms[0];
    if x0 == 0.0 {
        return Err(Error::Inconclusive("initial state is the origin".into()));
    }
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > FIT_FLOOR)
        .map(|(k, v)| (k as f64, v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Inconclusive("fewer than 3 usable points".into()));
    }
    let (slope, intercept) = least_squares_slope(&pts);
    let lambda = slope.exp();
    let c0 = intercept.exp() / x0;
    let mut residual: f64 = 0.0;
    let mut c = c0;
    for (k, v) in norms.iter().enumerate() {
        let bound = x0 * lambda.powi(k as i32);
        residual = residual.max(v - c0 * bound);
        if bound > 0.0 {
            c = c.max(v / bound);
        }
    }
    let tail_slope = least_squares_slope(&pts[pts.len() / 2..]).0;
    let converging = lambda < 1.0 && (pts.len() < 6 || tail_slope <= 0.5 * slope);
    Ok(ExponentialFit { c, lambda, residual, converging })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compfn::ScalarComparisonFn;
    use crate::ocp::{AnalyticLaw, AnalyticSolver, GradientSolver};
    use crate::ocp::test_problems::{integrator, signed_sqrt};

    fn integrator_plant() -> ParametricSystem {
        integrator().system().clone()
    }

    fn sqrt_solver() -> AnalyticSolver {
        AnalyticSolver::new(AnalyticLaw::new("-sat(x)", (vec![-2.0], vec![2.0]), |x| {
            InputSequence(vec![vec![-x[0].clamp(-1.0, 1.0)]])
        }))
    }

    #[test]
    fn integrator_nominal_run_decays_monotonically() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let run = run_closed_loop(&ctrl, &integrator_plant(), &[3.0], &constant_theta(&[0.0], 30), 60.0)
            .unwrap();
        assert!(!run.escaped);
        let norms = run.norms();
        assert!(norms[1..].windows(2).all(|w| w[1] <= w[0]));
        assert!(norms.last().unwrap() < &1e-6);
        for k in 0..run.inputs.len() {
            let next = integrator_plant().step(&run.states[k], &run.inputs[k], &run.theta_seq[k]).unwrap();
            assert_eq!(next, run.states[k + 1]);
        }
        for (k, d) in run.delta_v.iter().enumerate() {
            assert_eq!(*d, run.values[k + 1] - run.values[k]);
        }
    }

    #[test]
    fn integrator_escapes_below_minus_one() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let run = run_closed_loop(&ctrl, &integrator_plant(), &[3.0], &constant_theta(&[-1.5], 50), 60.0)
            .unwrap();
        assert!(run.escaped);
    }

    #[test]
    fn origin_stays_at_origin() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        for th in [-0.5, 0.0, 2.0, 7.0] {
            let run = run_closed_loop(&ctrl, &integrator_plant(), &[0.0], &constant_theta(&[th], 10), 60.0)
                .unwrap();
            assert!(run.states.iter().all(|x| x[0] == 0.0));
        }
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let err = run_closed_loop(&ctrl, &integrator_plant(), &[3.5], &constant_theta(&[0.0], 3), 60.0);
        assert!(matches!(err, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn sqrt_run_settles_at_mismatch_level() {
        let p = signed_sqrt();
        let solver = sqrt_solver();
        let ctrl = Controller::new(&p, &solver);
        let run =
            run_closed_loop(&ctrl, p.system(), &[0.5], &constant_theta(&[0.25], 50), 40.0).unwrap();
        let tail_min = run.norms()[10..=50].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(tail_min >= 0.2, "{tail_min}");
        let fit = exponential_fit(&run).unwrap();
        assert!(!fit.converging);
    }

    #[test]
    fn sqrt_field_matches_closed_form() {
        let p = signed_sqrt();
        let solver = sqrt_solver();
        let ctrl = Controller::new(&p, &solver);
        let field = cost_difference_field(&ctrl, p.system(), &[vec![0.3]], &[vec![0.5]]).unwrap();
        assert!((field.dv[0][0] - 0.12).abs() < 1e-12);
    }

    #[test]
    fn integrator_field_negative_inside_window() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let xs: Vec<Vec<f64>> = (-6..=6).filter(|i| *i != 0).map(|i| vec![i as f64 * 0.5]).collect();
        let ths: Vec<Vec<f64>> = [-0.5, 0.0, 1.0, 2.0].iter().map(|t| vec![*t]).collect();
        let field = cost_difference_field(&ctrl, &integrator_plant(), &xs, &ths).unwrap();
        for (i, row) in field.dv.iter().enumerate() {
            for (j, dv) in row.iter().enumerate() {
                assert!(*dv < 0.0, "x={:?} θ={:?} dv={dv}", xs[i], ths[j]);
            }
            // Closed-form V₂⁰; the nominal drop is 0.672x² near the origin,
            // short of ℓ(x,κ₂(x)) = 0.68x².
            let x = xs[i][0];
            let v2 = |x: f64| {
                if x.abs() <= 5.0 / 3.0 {
                    0.8 * x * x
                } else {
                    let x1 = x - x.signum();
                    0.5 * (x * x + 1.0) + 0.75 * x1 * x1
                }
            };
            let next = x - (0.6 * x).clamp(-1.0, 1.0);
            assert!((row[1] - (v2(next) - v2(x))).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn rpi_examples() {
        let p = signed_sqrt();
        let solver = sqrt_solver();
        let ctrl = Controller::new(&p, &solver);
        let space = ThetaSpace::full(1);
        let bounds = StateBox::new(vec![-2.0], vec![2.0]).unwrap();
        // lev₂ = [-1,1] maps into [-√(δ), √(δ)]; X₁ = lev₉ = [-2,2] holds up to δ = 3.
        assert!(rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, 9.0, 3.0, 200, 1).unwrap().passed);
        assert!(rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, 2.0, 1.0, 200, 1).unwrap().passed);
        assert!(!rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, 2.0, 3.0, 200, 1).unwrap().passed);

        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let bounds = StateBox::new(vec![-3.0], vec![3.0]).unwrap();
        for rho in [0.5, 2.0, 7.9] {
            assert!(rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, rho, 0.0, 60, 2).unwrap().passed);
        }
        assert!(rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, 7.9, 0.9, 60, 3).unwrap().passed);
        // θ = -2 lies in the ball and gives x⁺ = 1.6x near the origin.
        let rep = rpi_check(&ctrl, p.system(), &Lyapunov::ValueFunction, &space, &bounds, 7.9, 2.0, 60, 3).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst_theta, vec![-2.0]);
    }

    fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
    }

    #[test]
    fn sqrt_certification_is_ras_only() {
        let p = signed_sqrt();
        let solver = sqrt_solver();
        let ctrl = Controller::new(&p, &solver);
        let xs = grid_1d(-1.0, 1.0, 41);
        let ths = grid_1d(-0.5, 0.5, 11);
        let alpha3 = ScalarComparisonFn::quadratic(2.0);
        let lyap = Lyapunov::ValueFunction;
        let setup = CertificationSetup {
            rho: 2.0,
            delta: 0.5,
            x_samples: &xs,
            theta_samples: &ths,
            alpha3: &alpha3,
            quadratic_track: true,
            lyapunov: &lyap,
        };
        let rep = descent_certification(&ctrl, p.system(), &setup).unwrap();
        assert!(rep.rpi_ok);
        assert_eq!(rep.verdict, StabilityVerdict::RasOnly);
    }

    #[test]
    fn integrator_certification_is_ses_inside_window() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let xs = grid_1d(-2.8, 2.8, 29);
        let ths = grid_1d(-0.9, 0.9, 7);
        let alpha3 = ScalarComparisonFn::quadratic(0.5);
        let lyap = Lyapunov::ValueFunction;
        let setup = CertificationSetup {
            rho: 8.0,
            delta: 0.9,
            x_samples: &xs,
            theta_samples: &ths,
            alpha3: &alpha3,
            quadratic_track: true,
            lyapunov: &lyap,
        };
        let rep = descent_certification(&ctrl, &integrator_plant(), &setup).unwrap();
        assert_eq!(rep.verdict, StabilityVerdict::Ses, "{rep:?}");
        assert!(rep.descent_margin > 0.0);
    }

    #[test]
    fn gamma_v_vanishes_on_trivial_samples() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let plant = integrator_plant();
        assert_eq!(warm_start_perturbation(&ctrl, &plant, &[0.0], &[0.7]).unwrap(), Some(0.0));
        for x in [-2.0, 0.5, 1.7] {
            assert_eq!(warm_start_perturbation(&ctrl, &plant, &[x], &[0.0]).unwrap(), Some(0.0));
        }
        let space = ThetaSpace::full(1);
        let shells: Vec<(f64, Vec<Vec<f64>>)> =
            [0.0, 0.25, 0.5, 1.0].iter().map(|t| (*t, space.shell(*t, 2))).collect();
        let fit = fit_gamma_v(&ctrl, &plant, &grid_1d(-2.0, 2.0, 21), &shells, true).unwrap();
        assert_eq!(fit.sigma[0], 0.0);
        assert!(fit.sigma.windows(2).all(|w| w[1] >= w[0]));
        let g = fit.to_joint();
        assert!((g.eval(2.0, 0.5) - 4.0 * fit.sigma[2]).abs() < 1e-12);

        let coarse = GammaVFit { shells: vec![0.5, 1.0], sigma: vec![0.4, 0.8], ..fit };
        assert_eq!(coarse.sigma_at(0.0), 0.0);
        assert!((coarse.sigma_at(0.25) - 0.2).abs() < 1e-15);
        assert!((coarse.sigma_at(0.75) - 0.6).abs() < 1e-15);
        assert_eq!(coarse.sigma_at(3.0), 0.8);
    }

    #[test]
    fn integrator_model_error_envelope_is_identity() {
        let plant = integrator_plant();
        let space = ThetaSpace::full(1);
        let shells: Vec<(f64, Vec<Vec<f64>>)> =
            [0.0, 0.5, 1.0, 2.0].iter().map(|t| (*t, space.shell(*t, 2))).collect();
        let xb = StateBox::new(vec![-3.0], vec![3.0]).unwrap();
        let ub = StateBox::new(vec![-1.0], vec![1.0]).unwrap();
        let rep = model_error_bounds_check(&plant, &xb, &ub, &shells, 200, 4).unwrap();
        for (t, e) in rep.shells.iter().zip(&rep.envelope) {
            assert!((e - t).abs() < 1e-12, "t={t} e={e}");
        }
        assert!(rep.c1_track_ok && rep.continuity_track_ok);
    }

    #[test]
    fn sqrt_model_error_flags_c1_track() {
        let plant = signed_sqrt().system().clone();
        let space = ThetaSpace::full(1);
        let shells: Vec<(f64, Vec<Vec<f64>>)> =
            [0.0, 0.5, 1.0].iter().map(|t| (*t, space.shell(*t, 2))).collect();
        let xb = StateBox::new(vec![-2.0], vec![2.0]).unwrap();
        let ub = StateBox::new(vec![-1.0], vec![1.0]).unwrap();
        let rep = model_error_bounds_check(&plant, &xb, &ub, &shells, 200, 4).unwrap();
        assert!(!rep.c1_track_ok);
        assert!(rep.small_scale_growth > 10.0);
        assert!(rep.continuity_track_ok);
    }

    #[test]
    fn geometric_sequence_fit() {
        let states: Vec<Vec<f64>> = (0..20).map(|k| vec![2.0 * 0.5f64.powi(k)]).collect();
        let run = ClosedLoopRun {
            theta_seq: vec![vec![0.0]; 19],
            inputs: vec![vec![0.0]; 19],
            values: vec![0.0; 20],
            delta_v: vec![0.0; 19],
            states,
            escaped: false,
        };
        let fit = exponential_fit(&run).unwrap();
        assert!((fit.lambda - 0.5).abs() < 1e-10);
        assert!((fit.c - 1.0).abs() < 1e-10);
        assert!(fit.converging);
    }

    #[test]
    fn integrator_nominal_fit_contracts() {
        let p = integrator();
        let solver = GradientSolver::default();
        let ctrl = Controller::new(&p, &solver);
        let run = run_closed_loop(&ctrl, &integrator_plant(), &[1.0], &constant_theta(&[0.0], 15), 60.0)
            .unwrap();
        let fit = exponential_fit(&run).unwrap();
        assert!(fit.lambda < 1.0 && fit.converging);
        assert!((fit.lambda - 0.4).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn theta_space_shapes() {
        let s = ThetaSpace::new(vec![0.0, 0.0, 1.0], vec![0, 1]).unwrap();
        for th in s.shell(0.5, 12) {
            assert!((s.radius(&th) - 0.5).abs() < 1e-12);
            assert_eq!(th[2], 1.0);
        }
        assert!(s.ball_grid(1.0, 5).iter().all(|th| s.radius(th) <= 1.0 + 1e-12));
        assert_eq!(s.sample_ball(0.3, 50, 9), s.sample_ball(0.3, 50, 9));
        assert!(ThetaSpace::new(vec![0.0], vec![1]).is_err());
    }
}
