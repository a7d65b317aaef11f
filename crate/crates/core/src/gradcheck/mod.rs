//! Central finite-difference verification of reverse-mode gradients.
//!
//! An operation under test is a closure from input vars to an output var.
//! Non-scalar outputs are contracted with a fixed, non-uniform weight vector
//! so that every output element contributes to the checked scalar.

pub mod registry;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_EPSILON: f64 = 1e-7;
pub const MAX_EPSILON: f64 = 1e-3;
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// One checked coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    /// Position of the input in the list handed to the harness.
    pub input: usize,
    /// Flat element index inside that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// Coordinates where forward and backward secants disagree, i.e. the
    /// function has a kink at the sampled point.
    pub nondifferentiable: Vec<Coordinate>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.nondifferentiable.is_empty() && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn output_weight(j: usize) -> f64 {
    1.0 + 0.5 * (1.3 * j as f64 + 0.7).sin()
}

fn contract<'t>(out: Var<'t>) -> Var<'t> {
    let n = out.numel();
    if n == 1 {
        return out.reshape([1]);
    }
    let w: Vec<f64> = (0..n).map(output_weight).collect();
    let w = out.tape().constant(Tensor::from_vec([n], w));
    out.reshape([n]).mul(w).sum()
}

fn evaluate<F>(op: &F, inputs: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    contract(op(&tape, &vars)).item()
}

/// Checks every coordinate of every input.
pub fn finite_difference_gradcheck<F>(op: F, inputs: &[Tensor], epsilon: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    gradcheck_sampled(op, inputs, epsilon, None)
}

/// Like [`finite_difference_gradcheck`], but checks at most `per_input`
/// evenly spaced coordinates of each input.
pub fn gradcheck_sampled<F>(
    op: F,
    inputs: &[Tensor],
    epsilon: f64,
    per_input: Option<usize>,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(MIN_EPSILON..=MAX_EPSILON).contains(&epsilon) {
        return Err(Error::Config(format!(
            "gradcheck epsilon {epsilon} outside [{MIN_EPSILON}, {MAX_EPSILON}]"
        )));
    }
    let (f0, analytic) = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = contract(op(&tape, &vars));
        let grads = tape.backward(y);
        let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
        (y.item(), analytic)
    };
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradcheck output".into()));
    }
    let floor = 1e-6 * f0.abs().max(1.0);
    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match per_input {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let x = input.data()[idx];
            work[i].data_mut()[idx] = x + epsilon;
            let fp = evaluate(&op, &work);
            work[i].data_mut()[idx] = x - epsilon;
            let fm = evaluate(&op, &work);
            work[i].data_mut()[idx] = x;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[i].data()[idx];
            let coord = Coordinate {
                input: i,
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            };
            report.checked += 1;
            let forward = (fp - f0) / epsilon;
            let backward = (f0 - fm) / epsilon;
            if (forward - backward).abs() > 0.01 * forward.abs().max(backward.abs()) + 1e-4 + floor {
                report.nondifferentiable.push(coord);
                continue;
            }
            if coord.rel_error > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(coord.rel_error);
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}
