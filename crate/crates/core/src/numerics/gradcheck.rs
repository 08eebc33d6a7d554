//! Central finite-difference gradient checks at 64-bit.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Max relative error `|analytic - numeric| / max(1, |analytic|)` over every
/// coordinate of every input.
///
/// `f` must build a scalar on the tape from the supplied input vars.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NumericsError::InvalidConfig(format!("finite-difference step {h}")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, NumericsError>,
{
    finite_diff_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), h)
}
