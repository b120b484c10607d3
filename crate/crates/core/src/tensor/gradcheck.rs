use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central differences `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn central_difference(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut data = x.data().to_vec();
    let mut grad = vec![0.0; data.len()];
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), data.clone()));
        data[i] = orig - h;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), data.clone()));
        data[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `max_i |a_i - n_i| / (|a_i| + 1e-8)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of the scalar `f` at `x` with central
/// differences of step `h` and returns the maximum relative error.
pub fn finite_diff_check(
    f: &dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = f(&tape, v);
    let analytic = tape.backward(loss)?.wrt(v);
    let eval = |p: &Tensor| {
        let tape = Tape::inference();
        let v = tape.leaf(p.clone());
        f(&tape, v).value().data()[0]
    };
    let numeric = central_difference(&eval, x, h);
    Ok(max_relative_error(&analytic, &numeric))
}
