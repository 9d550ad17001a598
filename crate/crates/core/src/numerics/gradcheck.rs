use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f32) -> Result<f32>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("grad_check step must be positive, got {step}")));
    }
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(&x.clone().with_requires_grad(true));
        let loss = f(&tape, leaf)?;
        check_finite(loss.item(), None)?;
        tape.backward(loss)?;
        tape.grad(leaf)
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.constant(probe);
        Ok(f(&tape, leaf)?.item_f64())
    };
    let mut worst = 0.0f32;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let hi = orig + step;
        let lo = orig - step;
        probe.data_mut()[i] = hi;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        check_finite(plus as f32, Some(i))?;
        check_finite(minus as f32, Some(i))?;
        check_finite(analytic[i], Some(i))?;
        // divide by the representable width, not the nominal 2 * step
        let numeric = (plus - minus) / (hi as f64 - lo as f64);
        let err = (analytic[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err as f32);
    }
    Ok(worst)
}

fn check_finite(v: f32, coordinate: Option<usize>) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        coordinate: coordinate.unwrap_or(0),
        detail: match coordinate {
            Some(_) => format!("function or gradient evaluated to {v}"),
            None => format!("loss at the unperturbed point is {v}"),
        },
    })
}
