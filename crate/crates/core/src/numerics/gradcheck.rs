use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_FLOOR)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.variable(point.clone());
        let y = f(&mut tape, x)?;
        tape.backward(y)?.get(x)
    };
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        Ok(tape.scalar(y))
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
