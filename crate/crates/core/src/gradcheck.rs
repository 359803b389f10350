//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward values, so it is independent of
//! every backward rule it verifies.

use crate::tensor::{Result, Tape, Tensor, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude floor for the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradients of the scalar `f(inputs)` with central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_tensor(*v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[which].data()[idx], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = which;
                report.worst_index = idx;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `sum(x * weights)`: reduces a non-scalar op output to a scalar with a
/// generic (non-uniform) upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshaped(tape.shape(x))?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
