//! Central finite-difference checks for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative error with a floor on the denominator, so near-zero gradients
/// are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares analytic gradients of a scalar function against central
/// differences with the given step, perturbing every element of every input.
/// Returns the largest relative error seen.
pub fn max_gradient_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let params: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (idx, &exact) in analytic.iter().enumerate() {
            let original = probe[k].data()[idx];
            probe[k].data_mut()[idx] = original + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[idx] = original - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(exact, numeric));
        }
    }
    Ok(worst)
}
