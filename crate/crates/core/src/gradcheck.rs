//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used by every gradient check in the toolkit.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// Distance of the nearest relu/hinge input from its kink.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_coords(inputs, usize::MAX, f)
}

/// Like [`check`], but probes at most `max_per_input` evenly spaced
/// elements of each input (always including the first and last).
pub fn check_coords<F>(inputs: &[Tensor], max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let kink_margin = tape.min_kink_margin();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coordinates: 0,
        kink_margin,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in probe_indices(input.len(), max_per_input) {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[k].data()[e], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (k, e);
            }
        }
    }
    Ok(report)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let max = max.max(2);
    let mut idx: Vec<usize> = (0..max).map(|i| i * (len - 1) / (max - 1)).collect();
    idx.dedup();
    idx
}
