//! Central-difference gradient verification.

use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step `h`. Returns
/// `max_i |analytic_i − numeric_i| / max(|analytic_i|, 1e-8)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Float,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Var<'g, T>,
{
    let analytic = gradient(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(h);
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - T::of(h);
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let err = (a - numeric).abs() / a.abs().max(DENOM_FLOOR);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check`] for functions with kinks. Every piecewise operation
/// (leaky ReLU, max, interpolation cell and border clamp) is held on the
/// branch it takes at `x` while probing, so the central differences see
/// the smooth piece whose derivative at `x` the reverse pass computes.
pub fn grad_check_piecewise<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Float,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Var<'g, T>,
{
    let analytic = gradient(&f, x)?;
    let log = {
        let g = Graph::recording_pieces();
        f(&g, g.constant(x.clone()));
        g.take_piece_log()
    };
    let eval = |p: &Tensor<T>| -> Result<f64> {
        let g = Graph::replaying_pieces(log.clone());
        let y = f(&g, g.constant(p.clone())).value().item()?.as_f64();
        if !y.is_finite() {
            return Err(Error::NonFinite("function value".into()));
        }
        Ok(y)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(h);
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - T::of(h);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let a = analytic.data()[i].as_f64();
        let err = (a - (up - down) / (2.0 * h)).abs() / a.abs().max(DENOM_FLOOR);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Reverse-mode gradient of `f` at `x`.
pub fn gradient<T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Float,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Var<'g, T>,
{
    let g = Graph::new();
    let v = g.param(x.clone());
    let y = f(&g, v);
    y.backward()?;
    let grad = v.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    if !grad.all_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    Ok(grad)
}

fn evaluate<T, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    T: Float,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Var<'g, T>,
{
    let g = Graph::new();
    let y = f(&g, g.constant(x.clone())).value().item()?.as_f64();
    if !y.is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    Ok(y)
}
