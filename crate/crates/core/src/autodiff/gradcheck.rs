//! Central finite-difference verification of tape pullbacks.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-12;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)` over all
/// coordinates. `f` must be deterministic: freeze any noise it draws.
pub fn check_gradient<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradient_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

/// [`check_gradient`] over several inputs at once; `vars[i]` corresponds to
/// `points[i]`.
pub fn check_gradient_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(&f, points)?;
    let mut worst: f64 = 0.0;
    for (input, point) in points.iter().enumerate() {
        for coordinate in 0..point.len() {
            let numeric = central_difference(&f, points, input, coordinate, h)?;
            let a = analytic[input].data()[coordinate];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite { input, coordinate });
            }
            let rel = (a - numeric).abs() / (numeric.abs() + RELATIVE_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(out.item())
}

pub(crate) fn analytic_gradients<F>(f: &F, points: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = out.backward()?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn central_difference<F>(f: &F, points: &[Tensor], input: usize, coordinate: usize, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut shifted = points.to_vec();
    let x0 = points[input].data()[coordinate];
    let non_finite = |e: Error| match e {
        Error::Domain { .. } => Error::NonFinite { input, coordinate },
        other => other,
    };
    shifted[input].data_mut()[coordinate] = x0 + h;
    let plus = evaluate(f, &shifted).map_err(non_finite)?;
    shifted[input].data_mut()[coordinate] = x0 - h;
    let minus = evaluate(f, &shifted).map_err(non_finite)?;
    Ok((plus - minus) / (2.0 * h))
}
