//! Central finite-difference gradient oracle.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` receives a fresh tape and the registered input, and returns the scalar
/// output. The result is `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`
/// where `numeric_i = (f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, step, &coords)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates of `x`.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(TensorError::Parameter(format!("step {step} must be positive")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let y = f(&mut t, v)?;
        t.value(y)
            .item()
            .ok_or_else(|| TensorError::Contract("function must return a scalar".into()))
    };

    let mut worst = 0.0_f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
