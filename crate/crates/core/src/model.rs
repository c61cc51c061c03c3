//! Parametric discrete-time dynamics `x⁺ = f(x, u, θ)`, the model `f̂(x,u) = f(x,u,0)`,
//! and fixed-step integration of continuous-time vector fields under a
//! zero-order-held input.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;

type StepFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;
type JacobianFn = dyn Fn(&[f64], &[f64]) -> (Mat, Mat) + Send + Sync;

/// Relative central-difference step used when no analytic Jacobian is supplied.
pub const FD_REL_STEP: f64 = 1e-6;

#[derive(Clone)]
pub struct ParametricSystem {
    name: String,
    n: usize,
    m: usize,
    n_theta: usize,
    f: Arc<StepFn>,
    model_jacobian: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for ParametricSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametricSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("n_theta", &self.n_theta)
            .finish()
    }
}

impl ParametricSystem {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        n_theta: usize,
        f: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), n, m, n_theta, f: Arc::new(f), model_jacobian: None }
    }

    /// Attach analytic Jacobians `(∂f̂/∂x, ∂f̂/∂u)` of the model map.
    pub fn with_model_jacobian(
        mut self,
        jac: impl Fn(&[f64], &[f64]) -> (Mat, Mat) + Send + Sync + 'static,
    ) -> Self {
        self.model_jacobian = Some(Arc::new(jac));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.model_jacobian.is_some()
    }

    fn check_dims(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.n || u.len() != self.m || theta.len() != self.n_theta {
            return Err(invalid(format!(
                "{}: expected dims (n={}, m={}, n_theta={}), got ({}, {}, {})",
                self.name,
                self.n,
                self.m,
                self.n_theta,
                x.len(),
                u.len(),
                theta.len()
            )));
        }
        Ok(())
    }

    /// Plant map `f(x, u, θ)`.
    pub fn step(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u, theta)?;
        Ok((self.f)(x, u, theta))
    }

    /// Model map `f̂(x, u) = f(x, u, 0)`.
    pub fn model_step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.n_theta];
        self.step(x, u, &zero)
    }

    pub(crate) fn model_step_unchecked(&self, x: &[f64], u: &[f64], zero: &[f64]) -> Vec<f64> {
        (self.f)(x, u, zero)
    }

    /// Jacobians of the model map at `(x, u)`: analytic when attached,
    /// otherwise central differences with step `1e-6·(1+|·|)`.
    pub fn model_jacobians(&self, x: &[f64], u: &[f64]) -> (Mat, Mat) {
        if let Some(jac) = &self.model_jacobian {
            return jac(x, u);
        }
        let zero = vec![0.0; self.n_theta];
        let mut a = Mat::zeros(self.n, self.n);
        let mut b = Mat::zeros(self.n, self.m);
        let mut xp = x.to_vec();
        for j in 0..self.n {
            let h = FD_REL_STEP * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            let fp = (self.f)(&xp, u, &zero);
            xp[j] = x[j] - h;
            let fm = (self.f)(&xp, u, &zero);
            xp[j] = x[j];
            for i in 0..self.n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let mut up = u.to_vec();
        for j in 0..self.m {
            let h = FD_REL_STEP * (1.0 + u[j].abs());
            up[j] = u[j] + h;
            let fp = (self.f)(x, &up, &zero);
            up[j] = u[j] - h;
            let fm = (self.f)(x, &up, &zero);
            up[j] = u[j];
            for i in 0..self.n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (a, b)
    }
}

/// States `s[0] = x0`, `s[k+1] = f(s[k], u[k], θ)`.
pub fn open_loop_rollout(
    sys: &ParametricSystem,
    x0: &[f64],
    u_seq: &[Vec<f64>],
    theta: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut states = Vec::with_capacity(u_seq.len() + 1);
    states.push(x0.to_vec());
    for u in u_seq {
        let next = sys.step(states.last().expect("nonempty"), u, theta)?;
        states.push(next);
    }
    Ok(states)
}

type RhsFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// Continuous-time vector field `ẋ = F(x, u, θ)`.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    n: usize,
    m: usize,
    n_theta: usize,
    rhs: Arc<RhsFn>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OdeSystem({}, n={}, m={}, n_theta={})", self.name, self.n, self.m, self.n_theta)
    }
}

impl OdeSystem {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        n_theta: usize,
        rhs: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), n, m, n_theta, rhs: Arc::new(rhs) }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn eval(&self, x: &[f64], u: &[f64], theta: &[f64]) -> Vec<f64> {
        (self.rhs)(x, u, theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    pub delta: f64,
    pub substeps: usize,
}

impl Discretization {
    pub fn new(delta: f64, substeps: usize) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) || substeps == 0 {
            return Err(invalid("discretization needs delta > 0 and substeps >= 1"));
        }
        Ok(Self { delta, substeps })
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// One classical RK4 step with the input held constant.
pub fn rk4_step(ode: &OdeSystem, x: &[f64], u: &[f64], theta: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(invalid("rk4_step: step must be positive"));
    }
    let k1 = ode.eval(x, u, theta);
    let k2 = ode.eval(&axpy(x, 0.5 * h, &k1), u, theta);
    let k3 = ode.eval(&axpy(x, 0.5 * h, &k2), u, theta);
    let k4 = ode.eval(&axpy(x, h, &k3), u, theta);
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("rk4_step produced a non-finite state".into()));
    }
    Ok(out)
}

/// Flow `ψ(Δ; x, u, θ)` approximated by `substeps` RK4 steps.
pub fn exact_discretize(
    ode: &OdeSystem,
    disc: Discretization,
    x: &[f64],
    u: &[f64],
    theta: &[f64],
) -> Result<Vec<f64>> {
    let h = disc.delta / disc.substeps as f64;
    let mut state = x.to_vec();
    for _ in 0..disc.substeps {
        state = rk4_step(ode, &state, u, theta, h)?;
    }
    Ok(state)
}

/// `r(x,u,θ) = ψ(Δ) − x − Δ·F(x,u,θ)`, i.e. the integral of
/// `F(ψ(t)) − F(x)` over one sample interval.
pub fn residual_r(
    ode: &OdeSystem,
    disc: Discretization,
    x: &[f64],
    u: &[f64],
    theta: &[f64],
) -> Result<Vec<f64>> {
    let flow = exact_discretize(ode, disc, x, u, theta)?;
    let rate = ode.eval(x, u, theta);
    Ok((0..x.len()).map(|i| flow[i] - x[i] - disc.delta * rate[i]).collect())
}

/// Discrete plant `f(x,u,θ) = x + Δ·F(x,u,θ) + θ_k·r(x,u,θ)` where `θ_k` is
/// the parameter coordinate at `blend_index`. `θ_k = 1` returns the flow
/// itself, `θ_k = 0` the explicit Euler map.
pub fn blended_discretization(
    name: impl Into<String>,
    ode: OdeSystem,
    disc: Discretization,
    blend_index: usize,
) -> ParametricSystem {
    let (n, m, n_theta) = (ode.n(), ode.m(), ode.n_theta());
    assert!(blend_index < n_theta, "blend index outside the parameter vector");
    ParametricSystem::new(name, n, m, n_theta, move |x, u, theta| {
        let blend = theta[blend_index];
        let rate = ode.eval(x, u, theta);
        let euler: Vec<f64> = (0..x.len()).map(|i| x[i] + disc.delta * rate[i]).collect();
        if blend == 0.0 {
            return euler;
        }
        // Non-finite flows propagate as NaN and are caught by escape detection.
        let flow = match exact_discretize(&ode, disc, x, u, theta) {
            Ok(v) => v,
            Err(_) => return vec![f64::NAN; x.len()],
        };
        if blend == 1.0 {
            return flow;
        }
        (0..x.len()).map(|i| euler[i] + blend * (flow[i] - euler[i])).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integrator() -> ParametricSystem {
        ParametricSystem::new("integrator", 1, 1, 1, |x, u, th| vec![x[0] + (1.0 + th[0]) * u[0]])
    }

    fn exp_ode() -> OdeSystem {
        OdeSystem::new("exp", 1, 1, 1, |x, _, _| vec![x[0]])
    }

    fn pendulum_ode() -> OdeSystem {
        OdeSystem::new("pendulum", 2, 1, 3, |x, u, th| {
            vec![x[1], x[0].sin() - th[0] * th[0] * x[1] + (5.0 + th[1]) * u[0]]
        })
    }

    #[test]
    fn rollout_of_integrator() {
        let sys = integrator();
        let u = vec![vec![-1.0], vec![-1.0]];
        let s = open_loop_rollout(&sys, &[3.0], &u, &[0.0]).unwrap();
        assert_eq!(s, vec![vec![3.0], vec![2.0], vec![1.0]]);
        let s = open_loop_rollout(&sys, &[3.0], &u, &[0.5]).unwrap();
        assert_eq!(s, vec![vec![3.0], vec![1.5], vec![0.0]]);
        let s = open_loop_rollout(&sys, &[0.0], &vec![vec![0.0]; 4], &[7.0]).unwrap();
        assert!(s.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn rollout_rejects_dimension_mismatch() {
        let sys = integrator();
        let err = open_loop_rollout(&sys, &[1.0, 2.0], &[vec![0.0]], &[0.0]);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rk4_examples() {
        let zero = OdeSystem::new("zero", 2, 1, 1, |_, _, _| vec![0.0, 0.0]);
        assert_eq!(rk4_step(&zero, &[1.5, -2.0], &[0.3], &[0.0], 0.1).unwrap(), vec![1.5, -2.0]);

        let x = rk4_step(&pendulum_ode(), &[std::f64::consts::PI, 0.0], &[0.0], &[0.0; 3], 0.1)
            .unwrap();
        assert!((x[0] - std::f64::consts::PI).abs() < 1e-15 && x[1].abs() < 1e-15);

        let x = rk4_step(&exp_ode(), &[1.0], &[0.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_detects_overflow() {
        let blow = OdeSystem::new("blow", 1, 1, 1, |x, _, _| vec![x[0] * 1e308]);
        assert!(matches!(
            rk4_step(&blow, &[10.0], &[0.0], &[0.0], 1.0),
            Err(Error::NumericalOverflow(_))
        ));
    }

    #[test]
    fn exact_discretize_examples() {
        let disc = Discretization::new(0.1, 100).unwrap();
        let x = exact_discretize(&pendulum_ode(), disc, &[0.0, 0.0], &[0.0], &[0.0; 3]).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);

        let x = exact_discretize(&exp_ode(), disc, &[1.0], &[0.0], &[0.0]).unwrap();
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-12);

        let fine = Discretization::new(0.1, 10_000).unwrap();
        let a = exact_discretize(&pendulum_ode(), disc, &[0.1, 0.0], &[0.0], &[0.0; 3]).unwrap();
        let b = exact_discretize(&pendulum_ode(), fine, &[0.1, 0.0], &[0.0], &[0.0; 3]).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }

    #[test]
    fn halving_delta_converges() {
        // Two half-steps with half the substeps each versus one full step.
        let ode = pendulum_ode();
        let full = Discretization::new(0.1, 100).unwrap();
        let half = Discretization::new(0.05, 50).unwrap();
        for x0 in [[0.3, -0.2], [1.0, 0.5], [-2.0, 1.0]] {
            let a = exact_discretize(&ode, full, &x0, &[0.4], &[0.2, -0.5, 1.0]).unwrap();
            let mid = exact_discretize(&ode, half, &x0, &[0.4], &[0.2, -0.5, 1.0]).unwrap();
            let b = exact_discretize(&ode, half, &mid, &[0.4], &[0.2, -0.5, 1.0]).unwrap();
            assert!((a[0] - b[0]).abs() <= 1e-8 && (a[1] - b[1]).abs() <= 1e-8);
        }
    }

    #[test]
    fn residual_examples() {
        let disc = Discretization::new(0.1, 100).unwrap();
        // linear field at its equilibrium
        let lin = OdeSystem::new("lin", 1, 1, 1, |x, u, _| vec![-x[0] + u[0]]);
        let r = residual_r(&lin, disc, &[2.0], &[2.0], &[0.0]).unwrap();
        assert!(r[0].abs() < 1e-15);

        // second-order: halving Δ roughly quarters the residual
        let ode = pendulum_ode();
        let mut prev = None;
        for delta in [0.1, 0.05, 0.025] {
            let d = Discretization::new(delta, 100).unwrap();
            let r = residual_r(&ode, d, &[0.0, 0.0], &[0.1], &[0.0; 3]).unwrap();
            let mag = (r[0] * r[0] + r[1] * r[1]).sqrt();
            assert!(mag <= 0.3 * delta * delta, "residual {mag} too large at {delta}");
            if let Some(p) = prev {
                let ratio: f64 = p / mag;
                assert!((3.5..4.5).contains(&ratio), "order ratio {ratio}");
            }
            prev = Some(mag);
        }
    }

    #[test]
    fn blended_plant_limits() {
        let disc = Discretization::new(0.1, 100).unwrap();
        let plant = blended_discretization("p", pendulum_ode(), disc, 2);
        let x = [0.4, -0.3];
        let u = [0.2];
        let theta = [0.3, 0.1, 1.0];
        let flow = exact_discretize(&pendulum_ode(), disc, &x, &u, &theta).unwrap();
        assert_eq!(plant.step(&x, &u, &theta).unwrap(), flow);

        let euler_theta = [0.3, 0.1, 0.0];
        let rate = pendulum_ode().eval(&x, &u, &euler_theta);
        let euler: Vec<f64> = (0..2).map(|i| x[i] + 0.1 * rate[i]).collect();
        assert_eq!(plant.step(&x, &u, &euler_theta).unwrap(), euler);

        for a in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                let th = [a, b, 1.0];
                assert_eq!(plant.step(&[0.0, 0.0], &[0.0], &th).unwrap(), vec![0.0, 0.0]);
            }
        }
    }

    #[test]
    fn finite_difference_jacobian_of_linear_map() {
        let sys = integrator();
        let (a, b) = sys.model_jacobians(&[2.0], &[0.3]);
        assert!((a[(0, 0)] - 1.0).abs() < 1e-9 && (b[(0, 0)] - 1.0).abs() < 1e-9);
    }
}
