use super::{Tape, Tensor, Var};
use crate::error::{MpgatError, Result};

/// Relative discrepancy used by [`gradient_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv)?;
    match tape.value(out) {
        [v] => Ok(*v),
        other => Err(MpgatError::contract(format!(
            "gradient_check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}

/// Absolute discrepancy, relative to `max(1, |f(x)|)`, treated as agreement.
/// Central differences carry round-off of about `ε·|f|/h`, so a gradient
/// that is zero analytically comes back as noise near `1e-11`; without a
/// floor the relative error of such a coordinate is close to 1.
pub const NOISE_FLOOR: f64 = 1e-9;

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h`, returning the largest per-coordinate relative error.
/// Coordinates whose absolute discrepancy is below [`NOISE_FLOOR`] count as
/// exact.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(MpgatError::contract("finite-difference step must be positive"));
    }
    let mut probe = x.clone().with_grad();
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(&probe);
        let out = f(&mut tape, xv)?;
        tape.backward(out)?;
        tape.grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let floor = NOISE_FLOOR * eval_scalar(&f, &probe)?.abs().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        if (analytic[i] - numeric).abs() > floor {
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
