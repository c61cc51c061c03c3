//! Experiment configuration: a JSON file merged with command-line overrides,
//! resolved against a scenario's defaults and validated before any run.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mismatch_mpc::ocp::OcpSolver;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::scenario::{Scenario, ScenarioRegistry};

pub const DEFAULT_LEVELS: [f64; 5] = [-1.0, -0.1, 0.0, 0.1, 1.0];

/// Every field is optional; unset fields fall back to the scenario defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Option<String>,
    pub solver: Option<String>,
    /// Initial states.
    pub x0: Option<Vec<Vec<f64>>>,
    /// Constant parameter values, as full vectors or free coordinates.
    pub theta: Option<Vec<Vec<f64>>>,
    /// Additional runs with independent per-step draws from the `delta` ball.
    pub random_runs: Option<usize>,
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    /// Upper end of the bisection for the empirical `delta`.
    pub delta_max: Option<f64>,
    pub k_max: Option<usize>,
    /// `|x|` below which a run counts as converged.
    pub converge_tol: Option<f64>,
    pub x_range: Option<[f64; 2]>,
    pub theta_range: Option<[f64; 2]>,
    pub x_points: Option<usize>,
    pub theta_points: Option<usize>,
    pub levels: Option<Vec<f64>>,
    /// State samples used by certification.
    pub samples: Option<usize>,
    pub bisect_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        ExperimentConfig { $($f: $top.$f.clone().or_else(|| $base.$f.clone()),)* }
    };
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config JSON: {e}")))
    }

    /// Fields set in `top` replace those of `self`.
    pub fn merged(&self, top: &ExperimentConfig) -> Self {
        overlay!(
            self, top, scenario, solver, x0, theta, random_runs, rho, delta, delta_max, k_max,
            converge_tol, x_range, theta_range, x_points, theta_points, levels, samples,
            bisect_iterations, seed, out
        )
    }

    /// Loads the scenario and fills in its defaults.
    pub fn resolve(&self, registry: &ScenarioRegistry) -> Result<Experiment, CliError> {
        let name = self
            .scenario
            .clone()
            .ok_or_else(|| CliError::Config(format!("no scenario given; valid names: {}", registry.names().join(", "))))?;
        let scenario = registry.load(&name)?;
        let solver_name = self.solver.clone().unwrap_or_else(|| scenario.default_solver.to_string());
        let solver = scenario.solver(Some(&solver_name))?;
        let d = &scenario.defaults;
        let n = scenario.problem.n();
        let free_dim = scenario.theta_space.free_dim();

        let x0 = self.x0.clone().unwrap_or_else(|| d.x0.clone());
        for x in &x0 {
            if x.len() != n {
                return Err(CliError::Config(format!("x0 {x:?} must have {n} entries")));
            }
        }
        let thetas = match &self.theta {
            Some(ts) => ts.iter().map(|t| full_theta(&scenario, t)).collect::<Result<Vec<_>, _>>()?,
            None => d.thetas.clone(),
        };
        let delta = self.delta.unwrap_or(d.delta);
        let x_range = self
            .x_range
            .map(|r| (r[0], r[1]))
            .unwrap_or((scenario.state_box.lo[0], scenario.state_box.hi[0]));
        let exp = Experiment {
            solver_name,
            solver,
            x0,
            thetas,
            random_runs: self.random_runs.unwrap_or(0),
            rho: self.rho.unwrap_or(d.rho),
            delta,
            delta_max: self.delta_max.unwrap_or(2.0 * delta),
            k_max: self.k_max.unwrap_or(d.k_max),
            converge_tol: self.converge_tol.unwrap_or(1e-3),
            x_range,
            theta_range: self.theta_range.map(|r| (r[0], r[1])).unwrap_or(d.theta_range),
            x_points: self.x_points.unwrap_or(d.x_points),
            theta_points: self.theta_points.unwrap_or(d.theta_points),
            levels: self.levels.clone().unwrap_or_else(|| DEFAULT_LEVELS.to_vec()),
            samples: self.samples.unwrap_or(60),
            bisect_iterations: self.bisect_iterations.unwrap_or(12),
            seed: self.seed.unwrap_or(0),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            scenario,
        };
        if free_dim == 0 && exp.random_runs > 0 {
            return Err(CliError::Config("scenario has no free parameters to randomize".into()));
        }
        exp.validate()?;
        Ok(exp)
    }
}

/// Accepts a full parameter vector or one entry per free coordinate.
pub fn full_theta(scenario: &Scenario, t: &[f64]) -> Result<Vec<f64>, CliError> {
    let space = &scenario.theta_space;
    let full = scenario.plant().n_theta();
    if t.len() == full {
        Ok(t.to_vec())
    } else if t.len() == space.free_dim() {
        Ok(space.embed(t))
    } else {
        Err(CliError::Config(format!(
            "theta {t:?} must have {full} entries (or {} free coordinates)",
            space.free_dim()
        )))
    }
}

/// Parses `"1.5,-pi,0"`; `pi` and `-pi` are accepted as entries.
pub fn parse_vector(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok {
                "pi" => Ok(PI),
                "-pi" => Ok(-PI),
                _ => tok.parse::<f64>().map_err(|_| CliError::Config(format!("cannot parse `{tok}` in `{s}`"))),
            }
        })
        .collect()
}

/// Fully resolved experiment.
pub struct Experiment {
    pub scenario: Scenario,
    pub solver_name: String,
    pub solver: Arc<dyn OcpSolver>,
    pub x0: Vec<Vec<f64>>,
    /// Full parameter vectors.
    pub thetas: Vec<Vec<f64>>,
    pub random_runs: usize,
    pub rho: f64,
    pub delta: f64,
    pub delta_max: f64,
    pub k_max: usize,
    pub converge_tol: f64,
    pub x_range: (f64, f64),
    pub theta_range: (f64, f64),
    pub x_points: usize,
    pub theta_points: usize,
    pub levels: Vec<f64>,
    pub samples: usize,
    pub bisect_iterations: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Experiment {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if self.x0.is_empty() {
            return bad("need at least one x0".into());
        }
        if !self.x0.iter().all(|x| finite(x)) || !self.thetas.iter().all(|t| finite(t)) {
            return bad("x0 and theta entries must be finite".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive and finite, got {}", self.rho));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be nonnegative and finite, got {}", self.delta));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return bad(format!("delta_max must be positive and finite, got {}", self.delta_max));
        }
        if self.k_max == 0 {
            return bad("k_max must be positive".into());
        }
        if !(self.converge_tol > 0.0) {
            return bad("converge_tol must be positive".into());
        }
        for (label, r) in [("x_range", self.x_range), ("theta_range", self.theta_range)] {
            if !(r.0 < r.1 && r.0.is_finite() && r.1.is_finite()) {
                return bad(format!("{label} must satisfy lo < hi, got {r:?}"));
            }
        }
        if self.x_points < 2 || self.theta_points < 2 {
            return bad("grids need at least 2 points per axis".into());
        }
        if !finite(&self.levels) {
            return bad("contour levels must be finite".into());
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        Ok(())
    }
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("scenario", &self.scenario.name)
            .field("solver", &self.solver_name)
            .field("x0", &self.x0)
            .field("thetas", &self.thetas)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}
