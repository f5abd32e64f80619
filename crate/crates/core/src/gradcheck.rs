//! Central-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over all elements.
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when either side produced a non-finite value.
    pub diagnostic: Option<String>,
}

/// Compares the tape gradient of the scalar `f(x)` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |probe: Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        t.value(out)
            .item()
            .ok_or_else(|| TensorError::Contract(String::from("grad_check needs a scalar function")))
    };

    let mut max_rel_err: f64 = 0.0;
    let mut diagnostic = None;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            diagnostic = Some(format!("element {i}: analytic {a}, numeric {numeric}"));
            max_rel_err = f64::NAN;
            break;
        }
        let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradReport {
        max_rel_err,
        pass: diagnostic.is_none() && max_rel_err <= tol,
        diagnostic,
    })
}
