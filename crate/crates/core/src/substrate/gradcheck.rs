//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares every analytic partial of `f` at `inputs` with a central difference.
///
/// `f` builds a scalar loss from leaf variables for `inputs` (in order) and must
/// be deterministic. Returns the maximum relative error, where each error is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::arg(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[which].data_mut()[i] = orig + epsilon;
            let up = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig - epsilon;
            let down = evaluate(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[which].data()[i];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Evaluates `f` once without differentiation.
pub fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite_scalar(&tape, out)
}

/// Runs `f` once on a fresh tape and returns the gradient for every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

fn finite_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}
