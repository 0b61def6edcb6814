//! Central finite-difference gradient checking in double precision.

use crate::{Result, Tape, Tensor, Var};

/// Lower bound on the denominator of the relative error, so gradients that
/// are analytically zero compare on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares the tape's gradients of a scalar function against central
/// differences with step `h`, perturbing every element of every input.
///
/// `f` receives a fresh tape plus one leaf per input and must return a
/// scalar. It must be deterministic.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (analytic[j] - numeric).abs();
            let denom = analytic[j].abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_relative_error = report.max_relative_error.max(abs / denom);
            report.checked += 1;
        }
    }
    Ok(report)
}
