//! Comparison functions (class K, K∞ and joint K²) checked on sample grids,
//! and the sampling estimator for the scaling condition
//! `limsup_{s→0+} γ(s,τ)/α(s) < 1`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};

type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;
type JointFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Relative plateau tolerance for strict monotonicity checks.
pub const STRICTNESS_TOL: f64 = 1e-12;
/// Ratio above which a last-quartile increasing sequence counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 10.0;

#[derive(Clone)]
pub struct ScalarComparisonFn {
    label: String,
    f: Arc<ScalarFn>,
}

impl fmt::Debug for ScalarComparisonFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarComparisonFn({})", self.label)
    }
}

impl ScalarComparisonFn {
    pub fn new(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { label: label.into(), f: Arc::new(f) }
    }

    /// `s ↦ c·s²`
    pub fn quadratic(c: f64) -> Self {
        Self::new(format!("{c}*s^2"), move |s| c * s * s)
    }

    pub fn eval(&self, s: f64) -> f64 {
        (self.f)(s)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

#[derive(Clone)]
pub struct JointComparisonFn {
    label: String,
    f: Arc<JointFn>,
}

impl fmt::Debug for JointComparisonFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JointComparisonFn({})", self.label)
    }
}

impl JointComparisonFn {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), f: Arc::new(f) }
    }

    pub fn zero() -> Self {
        Self::new("0", |_, _| 0.0)
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        (self.f)(s, t)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

fn strictly_above(next: f64, prev: f64) -> bool {
    next - prev > STRICTNESS_TOL * (1.0 + prev.abs())
}

/// True iff `f(0) = 0` and `f` is strictly increasing across `grid`.
pub fn check_class_k(f: &ScalarComparisonFn, grid: &[f64]) -> Result<bool> {
    if grid.is_empty() {
        return Err(invalid("check_class_k: empty grid"));
    }
    if grid.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(invalid("check_class_k: grid must be finite and nonnegative"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("check_class_k: grid must be sorted ascending"));
    }
    if grid[0] != 0.0 {
        return Err(invalid("check_class_k: grid must contain 0"));
    }
    if f.eval(0.0) != 0.0 {
        return Ok(false);
    }
    let values: Vec<f64> = grid.iter().map(|s| f.eval(*s)).collect();
    Ok(values.windows(2).all(|w| strictly_above(w[1], w[0])))
}

/// Joint K² membership on a sample grid: vanishing on both axes and strictly
/// increasing in each argument while the other is held positive.
pub fn check_joint_k2(g: &JointComparisonFn, s_grid: &[f64], t_grid: &[f64]) -> Result<bool> {
    for grid in [s_grid, t_grid] {
        if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 {
            return Err(invalid("check_joint_k2: grids must be nonempty, nonnegative, ascending"));
        }
    }
    let vanishes = s_grid.iter().all(|&s| g.eval(s, 0.0) == 0.0)
        && t_grid.iter().all(|&t| g.eval(0.0, t) == 0.0);
    if !vanishes {
        return Ok(false);
    }
    let with_zero = |grid: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend(grid.iter().copied().filter(|x| *x > 0.0));
        v
    };
    let s_full = with_zero(s_grid);
    let t_full = with_zero(t_grid);
    for &t in t_full.iter().skip(1) {
        let row: Vec<f64> = s_full.iter().map(|&s| g.eval(s, t)).collect();
        if !row.windows(2).all(|w| strictly_above(w[1], w[0])) {
            return Ok(false);
        }
    }
    for &s in s_full.iter().skip(1) {
        let col: Vec<f64> = t_full.iter().map(|&t| g.eval(s, t)).collect();
        if !col.windows(2).all(|w| strictly_above(w[1], w[0])) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingVerdict {
    Passes,
    Fails,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub tau: f64,
    /// `(s, γ(s,τ)/α(s))`, `s` strictly decreasing.
    pub ratio_samples: Vec<(f64, f64)>,
    /// Ratio at the smallest `s`, present only when the tail is monotone.
    pub limit_estimate: Option<f64>,
    pub verdict: ScalingVerdict,
}

/// Log-spaced grid from `s_max` down to `s_min` (both included).
pub fn log_grid_descending(s_min: f64, s_max: f64, points: usize) -> Vec<f64> {
    let (lo, hi) = (s_min.ln(), s_max.ln());
    (0..points)
        .map(|i| {
            if i == 0 {
                s_max
            } else if i + 1 == points {
                s_min
            } else {
                (hi + (lo - hi) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Samples `γ(s,τ)/α(s)` as `s → 0+` and classifies the limit.
pub fn scaling_limit_estimate(
    gamma: &JointComparisonFn,
    alpha: &ScalarComparisonFn,
    tau: f64,
    s_min: f64,
    s_max: f64,
    points: usize,
) -> Result<ScalingReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid("scaling_limit_estimate: tau must be positive"));
    }
    if !(s_min > 0.0 && s_min < s_max && s_max.is_finite()) {
        return Err(invalid("scaling_limit_estimate: need 0 < s_min < s_max"));
    }
    if points < 8 {
        return Err(invalid("scaling_limit_estimate: need at least 8 points"));
    }
    let mut ratio_samples = Vec::with_capacity(points);
    for s in log_grid_descending(s_min, s_max, points) {
        let a = alpha.eval(s);
        if a == 0.0 {
            return Err(Error::DivisionDomain(format!(
                "alpha `{}` vanishes at s = {s:e}",
                alpha.label()
            )));
        }
        ratio_samples.push((s, gamma.eval(s, tau) / a));
    }

    let ratios: Vec<f64> = ratio_samples.iter().map(|(_, r)| *r).collect();
    let tail = &ratios[points - points / 4 - 1..];
    let flat_or = |ok: fn(f64, f64) -> bool| {
        tail.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            (b - a).abs() <= STRICTNESS_TOL * (1.0 + a.abs()) || ok(a, b)
        })
    };
    let nondecreasing = flat_or(|a, b| b >= a);
    let nonincreasing = flat_or(|a, b| b <= a);
    let strictly_increasing = tail.windows(2).all(|w| strictly_above(w[1], w[0]));
    let last = *ratios.last().expect("points >= 8");

    let limit_estimate = (nondecreasing || nonincreasing).then_some(last);
    let diverging = strictly_increasing && (last > DIVERGENCE_THRESHOLD || last.is_infinite());
    let all_below = ratios.iter().all(|r| *r < 1.0);

    let verdict = match limit_estimate {
        _ if diverging => ScalingVerdict::Fails,
        Some(l) if l >= 1.0 || l.is_nan() => ScalingVerdict::Fails,
        Some(l) if l < 1.0 && all_below => ScalingVerdict::Passes,
        _ => ScalingVerdict::Inconclusive,
    };

    Ok(ScalingReport { tau, ratio_samples, limit_estimate, verdict })
}

/// Largest sampled `δ` such that `γ(s,t) < α(s)` at every sampled
/// `s ∈ (0, ρ]` and every sampled `t ≤ δ`.
pub fn find_delta_for_rho(
    gamma: &JointComparisonFn,
    alpha: &ScalarComparisonFn,
    rho: f64,
    s_grid: &[f64],
    t_grid: &[f64],
) -> Result<Option<f64>> {
    if !(rho > 0.0) {
        return Err(invalid("find_delta_for_rho: rho must be positive"));
    }
    for grid in [s_grid, t_grid] {
        if grid.is_empty()
            || grid.iter().any(|v| !(*v > 0.0) || !v.is_finite())
            || grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(invalid("find_delta_for_rho: grids must be nonempty, positive, sorted"));
        }
    }
    let s_in: Vec<f64> = s_grid.iter().copied().filter(|s| *s <= rho).collect();
    if s_in.is_empty() {
        return Err(invalid("find_delta_for_rho: no s-grid point in (0, rho]"));
    }
    let alphas: Vec<f64> = s_in.iter().map(|s| alpha.eval(*s)).collect();
    let mut best = None;
    for &t in t_grid {
        let ok = s_in.iter().zip(&alphas).all(|(&s, &a)| gamma.eval(s, t) < a);
        if !ok {
            break;
        }
        best = Some(t);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        vec![0.0, 0.5, 1.0, 2.0]
    }

    #[test]
    fn class_k_examples() {
        assert!(check_class_k(&ScalarComparisonFn::new("s^2", |s| s * s), &grid()).unwrap());
        assert!(!check_class_k(&ScalarComparisonFn::new("min(1,s)", |s: f64| s.min(1.0)), &grid())
            .unwrap());
        let offset = ScalarComparisonFn::new("s-0.1", |s| s - 0.1);
        assert!(!check_class_k(&offset, &[0.0, 0.5, 1.0]).unwrap());
    }

    #[test]
    fn class_k_rejects_empty_grid() {
        let f = ScalarComparisonFn::quadratic(1.0);
        assert!(matches!(check_class_k(&f, &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn joint_k2_examples() {
        let s_grid = [0.0, 0.1, 0.5, 1.0];
        let g = JointComparisonFn::new("st+4sqrt(st)", |s, t| s * t + 4.0 * (s * t).sqrt());
        assert!(check_joint_k2(&g, &s_grid, &s_grid).unwrap());
        let not_vanishing = JointComparisonFn::new("s+t", |s, t| s + t);
        assert!(!check_joint_k2(&not_vanishing, &s_grid, &s_grid).unwrap());
    }

    #[test]
    fn scaling_example_a_diverges() {
        let g = JointComparisonFn::new("st", |s, t| s * t);
        let a = ScalarComparisonFn::quadratic(1.0);
        let r = scaling_limit_estimate(&g, &a, 0.1, 1e-8, 1.0, 64).unwrap();
        assert_eq!(r.verdict, ScalingVerdict::Fails);
        assert!(r.ratio_samples.windows(2).all(|w| w[1].0 < w[0].0));
    }

    #[test]
    fn scaling_example_b_has_limit_two() {
        let g = JointComparisonFn::new("2st/(s+t)", |s, t| 2.0 * s * t / (s + t));
        let a = ScalarComparisonFn::new("s", |s| s);
        let r = scaling_limit_estimate(&g, &a, 0.1, 1e-8, 1.0, 64).unwrap();
        assert_eq!(r.verdict, ScalingVerdict::Fails);
        let l = r.limit_estimate.unwrap();
        assert!((l - 2.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn scaling_quadratic_form_passes() {
        let g = JointComparisonFn::new("t*s^2", |s, t| t * s * s);
        let a = ScalarComparisonFn::quadratic(2.0);
        let r = scaling_limit_estimate(&g, &a, 1.0, 1e-8, 1.0, 64).unwrap();
        assert_eq!(r.verdict, ScalingVerdict::Passes);
        assert!((r.limit_estimate.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scaling_rejects_vanishing_alpha() {
        let g = JointComparisonFn::zero();
        let a = ScalarComparisonFn::new("0", |_| 0.0);
        assert!(matches!(
            scaling_limit_estimate(&g, &a, 1.0, 1e-8, 1.0, 16),
            Err(Error::DivisionDomain(_))
        ));
    }

    #[test]
    fn delta_for_quadratic_perturbation() {
        let g = JointComparisonFn::new("t*s^2", |s, t| t * s * s);
        let a = ScalarComparisonFn::quadratic(2.0);
        let s_grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let t_grid: Vec<f64> = (1..=400).map(|i| i as f64 / 100.0).collect();
        let d = find_delta_for_rho(&g, &a, 1.0, &s_grid, &t_grid).unwrap().unwrap();
        // largest sampled t strictly below 2
        assert!((d - 1.99).abs() < 1e-12, "{d}");
        for s in &s_grid {
            assert!(g.eval(*s, d) < a.eval(*s));
        }
    }

    #[test]
    fn delta_none_for_sqrt_perturbation() {
        let g = JointComparisonFn::new("st+4sqrt(st)", |s, t| s * t + 4.0 * (s * t).sqrt());
        let a = ScalarComparisonFn::quadratic(2.0);
        let mut s_grid = log_grid_descending(1e-6, 1.0, 64);
        s_grid.reverse();
        let t_grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(find_delta_for_rho(&g, &a, 1.0, &s_grid, &t_grid).unwrap(), None);
    }

    #[test]
    fn delta_for_zero_perturbation_is_largest_t() {
        let a = ScalarComparisonFn::quadratic(1.0);
        let t_grid = [0.1, 0.5, 3.0];
        let d = find_delta_for_rho(&JointComparisonFn::zero(), &a, 0.5, &[0.1, 0.2], &t_grid);
        assert_eq!(d.unwrap(), Some(3.0));
    }
}
