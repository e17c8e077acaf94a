use super::{DiffArray, OpKind, Tape};
use crate::error::Result;

/// Worst relative error between reverse-mode gradients of `f` at `point` and
/// central finite differences with step `step`. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(f: F, shape: &[usize], point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &DiffArray) -> Result<DiffArray>,
{
    check_gradients_with_fault(f, shape, point, step, None)
}

/// [`check_gradients`] on a tape whose `fault` backward rule is sign-flipped.
#[doc(hidden)]
pub fn check_gradients_with_fault<F>(
    f: F,
    shape: &[usize],
    point: &[f64],
    step: f64,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&Tape, &DiffArray) -> Result<DiffArray>,
{
    let tape = match fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    };
    let x = tape.var(shape, point.to_vec())?;
    let y = f(&tape, &x)?;
    let analytic = if y.is_tracked() {
        tape.backward(&y)?.get_or_zeros(&x)
    } else {
        vec![0.0; point.len()]
    };

    let eval = |p: Vec<f64>| -> Result<f64> {
        let scratch = Tape::new();
        let c = DiffArray::constant(shape, p)?;
        Ok(f(&scratch, &c)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += step;
        let mut minus = point.to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
