//! Central finite-difference gradient oracle.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor, using central differences with `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// As [`finite_difference_check`], over every coordinate of several inputs.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.detached().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.detached())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detached).collect();
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (g - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
