//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Denominator floor of [`relative_error`]. Below this magnitude the
/// round-off of a central difference (about `1e-16 * |f| / step`) dominates,
/// so tiny gradients are compared in absolute terms instead.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

const PROJECTION_SEED: u64 = 0x9e37_79b9;

/// Evaluates `f` and reduces a non-scalar output with fixed random weights,
/// so outputs whose plain sum is constant (softmax) still get a useful check.
fn scalar_output<F>(f: &F, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let out = f(tape, vars)?;
    let value = tape.value(out)?;
    if value.is_scalar() {
        return Ok(out);
    }
    let shape = value.shape().to_vec();
    let mut rng = Rng::new(PROJECTION_SEED);
    let weights: Vec<f64> = (0..value.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let w = tape.constant(Tensor::from_vec(&shape, weights)?);
    let weighted = tape.mul(out, w)?;
    tape.sum(weighted)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = scalar_output(f, &mut tape, &vars)?;
    tape.value(out)?.item()
}

/// Compares reverse-mode gradients of `f` with respect to every element of
/// every input against central differences with step `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, step, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `max_per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = scalar_output(&f, &mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads.take_all(&vars)?;
    drop(tape);

    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if coords.len() > max_per_input {
            rng.shuffle(&mut coords);
            coords.truncate(max_per_input);
        }
        for j in coords {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + step;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x - step;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
