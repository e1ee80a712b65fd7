//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the reverse-mode gradient of the scalar `f(x)` against central
/// differences with the given `step`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let root = f(&mut tape, xv)?;
    check_finite(tape.value(root).item(), "forward")?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe, false);
        let r = f(&mut tape, v)?;
        let y = tape.value(r).item();
        check_finite(y, "perturbed forward")?;
        Ok(y)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(y: f64, what: &str) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} value {y}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.7]).unwrap();
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let x = Tensor::new(&[1], vec![-1.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let l = t.ln(x);
                Ok(t.sum(l))
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
