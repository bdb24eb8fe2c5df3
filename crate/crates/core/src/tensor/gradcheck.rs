//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_index: usize,
    /// First element whose analytic or numeric gradient is not finite.
    pub non_finite: Option<usize>,
}

impl InputReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with the given `step`, one report per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut report = InputReport {
            max_rel_error: 0.0,
            worst_index: 0,
            non_finite: None,
        };
        for j in 0..work[k].numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let plus = eval(&f, &work)?;
            work[k].data_mut()[j] = orig - step;
            let minus = eval(&f, &work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite.get_or_insert(j);
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = j;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        tolerance,
        inputs: reports,
    })
}
