use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-12)`.
/// `f` must be deterministic; record dropout in eval mode.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    compare(f, x, h, |eval, h| Ok((eval(h)? - eval(-h)?) / (2.0 * h)))
}

/// Same error measure as [`grad_check`], against the Richardson combination
/// `(8·D(h/2) − D(h)) / 3` of two central differences. Its truncation error is
/// `O(h⁴)`, so larger steps can be used on strongly curved functions, which
/// also lowers the round-off floor.
pub fn grad_check_extrapolated<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    compare(f, x, h, |eval, h| {
        let wide = eval(h)? - eval(-h)?;
        let narrow = eval(h / 2.0)? - eval(-h / 2.0)?;
        Ok((8.0 * narrow - wide) / (6.0 * h))
    })
}

fn compare<F, D>(f: F, x: &Tensor, h: f64, diff: D) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    D: Fn(&dyn Fn(f64) -> Result<f64>, f64) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Domain {
            what: "finite-difference step",
            value: h,
            domain: "[1e-7, 1e-3]",
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let analytic = tape.backward(out)?.get(xv);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = x.clone();
            probe.data_mut()[i] += delta;
            let mut t = Tape::new();
            let v = t.constant(probe);
            let y = f(&mut t, v)?;
            t.value(y).item()
        };
        let numeric = diff(&eval, h)?;
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}
