//! Finite-difference verification of the analytic gradients.
//!
//! Every claim the backward pass makes is checkable against the objective
//! itself: perturb one parameter entry by `+/-epsilon`, evaluate the full
//! objective twice, and the centered difference must agree with the
//! analytic partial derivative. This module runs that comparison over every
//! parameter entry of a network and reports the worst disagreement with
//! enough context to find it.
//!
//! Checks must run under a frozen forward context: dropout masks are a pure
//! function of `(layer seed, step)`, so fixing the step keeps the perturbed
//! evaluations on the same objective. Gates are only differentiable away
//! from their thresholds; pick `gamma` so no companion bracket sits within
//! `epsilon` of zero or the centered difference will straddle the kink.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::{DsnNetwork, GradientSet};
use crate::tensor::Tensor;

/// Parameter-count ceiling: each entry costs two full forward passes, so
/// this harness is for purpose-built small networks, not trained models.
const MAX_CHECKED_PARAMS: usize = 10_000;

/// Relative-error denominator floor. Below this magnitude a disagreement
/// counts against the floor itself, making the comparison absolute: the
/// centered-difference oracle carries roundoff noise of order 1e-10 at the
/// probe step used here, which would swamp a pure relative test on
/// near-zero gradients while a genuine error (a dropped term, a sign flip)
/// still exceeds the floor-scaled tolerance at any magnitude.
const REL_ERR_FLOOR: f64 = 1e-4;

/// One disagreement between analytic and numeric derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFinding {
    /// Index into the canonical parameter-tensor order.
    pub tensor_index: usize,
    /// Flat element index within that tensor.
    pub element: usize,
    /// Human-readable location, e.g. `backbone layer 0 filters`.
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a full finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Total parameter entries compared.
    pub checked: usize,
    /// Largest relative error seen anywhere.
    pub max_rel_err: f64,
    /// Location of that largest error.
    pub worst: Option<GradCheckFinding>,
    /// Every entry whose relative error exceeded the tolerance.
    pub failures: Vec<GradCheckFinding>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`: symmetric relative error with an
/// absolute floor so that two near-zero values compare as equal.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Names each parameter tensor in canonical order.
fn param_names(net: &DsnNetwork) -> Vec<String> {
    let mut names = Vec::new();
    for (idx, layer) in net.layers().iter().enumerate() {
        if layer.weights().is_some() {
            names.push(format!("backbone layer {idx} filters"));
        }
    }
    for companion in net.companions() {
        names.push(format!(
            "companion head after layer {}",
            companion.after_layer()
        ));
    }
    names.push(String::from("output head"));
    names
}

/// Objective value at the network's current parameters.
fn objective(net: &DsnNetwork, x: &Tensor, labels: &[usize], ctx: &ForwardCtx) -> Result<f64> {
    let (breakdown, _) = net.forward_all(x, labels, ctx)?;
    Ok(breakdown.f)
}

/// Compares a supplied gradient set against centered finite differences of
/// the objective, entry by entry. The network is perturbed in place during
/// the sweep and restored exactly (each entry is reassigned its original
/// bits), so it leaves this function as it entered.
///
/// Splitting the gradient computation from the comparison lets a caller
/// verify any gradient source; [`finite_difference_check`] wires in the
/// network's own backward pass.
pub fn compare_with_numeric(
    net: &mut DsnNetwork,
    x: &Tensor,
    labels: &[usize],
    ctx: &ForwardCtx,
    grads: &GradientSet,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::DomainError {
            detail: format!("epsilon must be a positive step, got {epsilon}"),
        });
    }
    // Zero is allowed: it demands exact agreement, which floating point
    // never delivers, so the sweep runs and honestly fails everywhere.
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::DomainError {
            detail: format!("tolerance must be non-negative, got {tolerance}"),
        });
    }
    let total: usize = net.param_tensors().iter().map(|t| t.len()).sum();
    if total > MAX_CHECKED_PARAMS {
        return Err(Error::DomainError {
            detail: format!(
                "{total} parameters exceed the {MAX_CHECKED_PARAMS}-entry \
                 finite-difference budget; use a smaller probe network"
            ),
        });
    }
    let grad_tensors: Vec<Tensor> = grads.tensors().cloned().collect();
    let names = param_names(net);
    if grad_tensors.len() != names.len() {
        return Err(Error::ShapeMismatch {
            context: "gradient check",
            detail: format!(
                "{} gradient tensors for {} parameter tensors",
                grad_tensors.len(),
                names.len()
            ),
        });
    }
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for tensor_index in 0..grad_tensors.len() {
        let len = net.param_tensors()[tensor_index].len();
        if grad_tensors[tensor_index].len() != len {
            return Err(Error::ShapeMismatch {
                context: "gradient check",
                detail: format!(
                    "tensor {tensor_index}: {} gradient entries for {len} parameters",
                    grad_tensors[tensor_index].len()
                ),
            });
        }
        for element in 0..len {
            let original = net.param_tensors()[tensor_index].data()[element];
            net.param_tensors_mut()[tensor_index].data_mut()[element] = original + epsilon;
            let plus = objective(net, x, labels, ctx)?;
            net.param_tensors_mut()[tensor_index].data_mut()[element] = original - epsilon;
            let minus = objective(net, x, labels, ctx)?;
            net.param_tensors_mut()[tensor_index].data_mut()[element] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grad_tensors[tensor_index].data()[element];
            let err = rel_err(analytic, numeric);
            report.checked += 1;
            let finding = GradCheckFinding {
                tensor_index,
                element,
                path: names[tensor_index].clone(),
                analytic,
                numeric,
                rel_err: err,
            };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(finding.clone());
            }
            if err > tolerance {
                report.failures.push(finding);
            }
        }
    }
    Ok(report)
}

/// Full self-check: runs the network's own backward pass on `(x, labels)`
/// under `ctx`, then sweeps every parameter entry against centered finite
/// differences of the objective.
pub fn finite_difference_check(
    net: &mut DsnNetwork,
    x: &Tensor,
    labels: &[usize],
    ctx: &ForwardCtx,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, pass) = net.forward_all(x, labels, ctx)?;
    let grads = net.backward_all(&pass)?;
    compare_with_numeric(net, x, labels, ctx, &grads, epsilon, tolerance)
}
