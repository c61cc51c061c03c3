//! Closed-form optimal input sequences, for scenarios where the minimizer is
//! known analytically (and the nonsmooth ones where a gradient method is not
//! appropriate).

use std::fmt;
use std::sync::Arc;

use super::{InputSequence, MpcProblem, OcpSolution, OcpSolver};
use crate::error::Result;

type SequenceFn = dyn Fn(&[f64]) -> InputSequence + Send + Sync;
type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct AnalyticLaw {
    label: String,
    sequence: Arc<SequenceFn>,
    value_fn: Option<Arc<ValueFn>>,
    /// Per-coordinate state box on which the closed form is valid.
    pub domain: (Vec<f64>, Vec<f64>),
}

impl fmt::Debug for AnalyticLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AnalyticLaw({})", self.label)
    }
}

impl AnalyticLaw {
    pub fn new(
        label: impl Into<String>,
        domain: (Vec<f64>, Vec<f64>),
        sequence: impl Fn(&[f64]) -> InputSequence + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), sequence: Arc::new(sequence), value_fn: None, domain }
    }

    pub fn with_value_fn(mut self, v: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.value_fn = Some(Arc::new(v));
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().zip(self.domain.0.iter().zip(&self.domain.1)).all(|(v, (l, h))| v >= l && v <= h)
    }

    pub fn sequence(&self, x: &[f64]) -> InputSequence {
        (self.sequence)(x)
    }

    pub fn kappa(&self, x: &[f64]) -> Vec<f64> {
        self.sequence(x).0.into_iter().next().unwrap_or_default()
    }

    /// Closed-form `V_N⁰(x)` when known.
    pub fn value(&self, x: &[f64]) -> Option<f64> {
        self.value_fn.as_ref().map(|v| v(x))
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticSolver {
    pub law: AnalyticLaw,
}

impl AnalyticSolver {
    pub fn new(law: AnalyticLaw) -> Self {
        Self { law }
    }
}

impl OcpSolver for AnalyticSolver {
    fn name(&self) -> &str {
        "analytic"
    }

    fn solve(
        &self,
        prob: &MpcProblem,
        x: &[f64],
        _warm: Option<&InputSequence>,
    ) -> Result<OcpSolution> {
        prob.evaluate(x, self.law.sequence(x), 0, 0.0)
    }
}
