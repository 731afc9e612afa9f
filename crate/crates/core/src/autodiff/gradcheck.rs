//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`, maximised.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item() as f64)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h` for every element of every input.
///
/// The divisor is the realised `f32` step `x+ - x-`, so rounding of the
/// perturbed input does not bias the estimate.
pub fn check_gradients<F>(inputs: &[Tensor], h: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("check_gradients", "function must return a scalar"));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("param grad")).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            let (xp, xm) = (x + h, x - h);
            work[i].data_mut()[j] = xp;
            let fp = eval(&work, &f)?;
            work[i].data_mut()[j] = xm;
            let fm = eval(&work, &f)?;
            work[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic[i].data()[j] as f64;
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradCheckReport {
                    max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                    worst_input: i,
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
