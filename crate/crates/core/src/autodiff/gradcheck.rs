//! Central-difference validation of tape gradients.

use super::param::{Bound, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`, with
/// `numeric` from central differences of `value` at step `h`.
pub fn grad_check_fn(
    value: impl Fn(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x: &[f64],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = value(&probe)?;
        probe[i] = x[i] - h;
        let down = value(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite derivative at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn eval_scalar(tape: &Tape, v: Var) -> Result<f64> {
    let s = tape.scalar_value(v)?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("function value {s} is not finite")));
    }
    Ok(s)
}

/// Gradient check of a scalar tensor function with respect to its input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    eval_scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let shape = x.shape().to_vec();
    grad_check_fn(
        |p| {
            let mut t = Tape::new();
            let v = t.leaf(Tensor::new(shape.clone(), p.to_vec())?, false);
            let o = f(&mut t, v)?;
            eval_scalar(&t, o)
        },
        &analytic,
        x.data(),
        h,
    )
}

/// Gradient check of a loss with respect to every scalar of a parameter set.
pub fn grad_check_params<F>(ps: &ParamSet, loss: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    eval_scalar(&tape, out)?;
    tape.backward(out)?;
    let mut analytic = Vec::with_capacity(ps.num_scalars());
    for (p, &v) in ps.params().iter().zip(bound.vars()) {
        match tape.grad(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(p.value.len())),
        }
    }
    let x: Vec<f64> = ps
        .params()
        .iter()
        .flat_map(|p| p.value.data().iter().copied())
        .collect();
    grad_check_fn(
        |flat| {
            let mut probe = ps.clone();
            let mut off = 0;
            for p in probe.params_mut() {
                let n = p.value.len();
                p.value.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
            let mut t = Tape::new();
            let b = probe.bind(&mut t);
            let o = loss(&mut t, &b)?;
            eval_scalar(&t, o)
        },
        &analytic,
        &x,
        h,
    )
}
