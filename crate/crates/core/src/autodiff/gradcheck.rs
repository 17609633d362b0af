use std::collections::{BTreeMap, HashMap};

use super::exec::{backward, forward};
use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Agreement required between the central differences at `ε` and `ε/2`
/// for an entry to count as resolved.
pub const RESOLUTION_TOLERANCE: f64 = 2e-5;

/// Gradient entries are compared relative to at least this fraction of the
/// loss magnitude: below it central differences in `f64` cannot resolve a
/// relative error of the tolerated size.
pub const LOSS_RELATIVE_FLOOR: f64 = 1e-5;

/// Largest fraction of unresolved entries a passing report may contain.
pub const MAX_UNRESOLVED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    /// Largest relative error over resolved entries.
    pub max_rel_error: f64,
    /// Largest relative error over every entry.
    pub strict_max_rel_error: f64,
    /// Entry with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose perturbed loss was not finite.
    pub non_finite: Vec<usize>,
    /// Entries where the differences at `ε` and `ε/2` disagree, meaning the
    /// loss is not smooth (a kink of relu or bilinear sampling) or is at
    /// rounding level within the step.
    pub unresolved: Vec<usize>,
    pub entries: usize,
}

/// Per-parameter-tensor comparison of analytic and central-difference gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub tensors: BTreeMap<String, TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.values().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.non_finite.is_empty())
    }

    pub fn strict_max_rel_error(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.strict_max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.tensors.values().map(|t| t.entries).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.tensors.values().map(|t| t.unresolved.len()).sum()
    }

    pub fn unresolved_fraction(&self) -> f64 {
        match self.entries() {
            0 => 0.0,
            n => self.unresolved() as f64 / n as f64,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.all_finite() && self.max_rel_error() < tol && self.unresolved_fraction() <= MAX_UNRESOLVED_FRACTION
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against `(L(p+ε) − L(p−ε)) / 2ε` for every entry of
/// every parameter tensor the graph declares. The same difference with step
/// `ε/2` decides whether an entry is resolved.
pub fn check_gradients(
    graph: &Graph,
    loss: NodeId,
    inputs: &HashMap<String, Tensor<f64>>,
    params: &ParamStore<f64>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let acts = forward(graph, inputs, params)?;
    let grads = backward(graph, &acts, loss)?;
    let floor = (LOSS_RELATIVE_FLOOR * acts.scalar(loss).abs().max(1.0)).max(1e-8);
    let mut report = GradCheckReport::default();
    let mut work = params.clone();

    let names: Vec<String> = graph.param_specs().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let analytic = grads.param(&name).expect("declared parameter");
        let n = analytic.numel();
        let mut check = TensorCheck {
            max_rel_error: 0.0,
            strict_max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            non_finite: Vec::new(),
            unresolved: Vec::new(),
            entries: n,
        };
        for i in 0..n {
            let orig = work.require(&name)?.data()[i];
            let eval = |value: f64, work: &mut ParamStore<f64>| -> Result<f64> {
                work.get_mut(&name).expect("present").data_mut()[i] = value;
                Ok(forward(graph, inputs, work)?.scalar(loss))
            };
            let plus = eval(orig + epsilon, &mut work)?;
            let minus = eval(orig - epsilon, &mut work)?;
            let half_plus = eval(orig + epsilon / 2.0, &mut work)?;
            let half_minus = eval(orig - epsilon / 2.0, &mut work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            if ![plus, minus, half_plus, half_minus].iter().all(|v| v.is_finite()) {
                check.non_finite.push(i);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let half = (half_plus - half_minus) / epsilon;
            let a = analytic.data()[i];
            let err = relative_error_with_floor(a, numeric, floor);
            check.strict_max_rel_error = check.strict_max_rel_error.max(err);
            if relative_error_with_floor(half, numeric, floor) > RESOLUTION_TOLERANCE {
                check.unresolved.push(i);
                continue;
            }
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.tensors.insert(name, check);
    }
    Ok(report)
}
