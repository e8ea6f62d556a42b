use crate::error::{Error, Result};
use crate::losses::{registration_loss, LossWeights};
use crate::nets::ParamStore;
use crate::tensor::{Graph, Tensor};
use crate::warp::RegistrationField;

use super::Adam;

/// Consecutive loss increases after which the optimization is abandoned.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone)]
pub struct ClassicalResult {
    /// Field with the lowest objective seen.
    pub field: RegistrationField,
    /// Objective at every iterate, starting with the zero field.
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub best: Vec<f64>,
    pub diverged: bool,
}

/// Minimizes the registration objective directly over the field of a
/// single pair, starting from zero, with Adam steps of size `step_size`.
/// No networks are involved.
pub fn classical_register(
    moving: &Tensor,
    fixed: &Tensor,
    w: &LossWeights,
    iters: usize,
    step_size: f64,
) -> Result<ClassicalResult> {
    if moving.shape() != fixed.shape() {
        return Err(Error::shape("classical_register", moving.shape(), fixed.shape()));
    }
    w.validate()?;
    let s = moving.shape();
    if s.len() < 3 {
        return Err(Error::invalid("classical_register", format!("expected [B, C, spatial...], got {s:?}")));
    }
    let mut field_shape = vec![s[0], s.len() - 2];
    field_shape.extend_from_slice(&s[2..]);
    let mut store = ParamStore::new();
    let id = store.add("field", Tensor::zeros(field_shape));
    let mut adam = Adam::new(&store, step_size);
    let (m64, f64_) = (moving.cast::<f64>(), fixed.cast::<f64>());

    let eval = |store: &ParamStore| -> Result<(f64, Tensor)> {
        let g = Graph::<f64>::new();
        let u = g.param(store.get(id).cast());
        let loss = registration_loss(g.constant(m64.clone()), g.constant(f64_.clone()), u, w)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("classical registration objective".into()));
        }
        loss.backward()?;
        let grad = u.grad().unwrap_or_else(|| Tensor::zeros(u.shape()));
        Ok((value, grad.cast()))
    };

    let (mut loss, mut grad) = eval(&store)?;
    let mut best_field = store.get(id).clone();
    let (mut losses, mut best) = (vec![loss], vec![loss]);
    let mut rising = 0;
    let mut diverged = false;
    for _ in 0..iters {
        adam.step(&mut store, std::slice::from_ref(&grad))?;
        let prev = loss;
        (loss, grad) = eval(&store)?;
        losses.push(loss);
        let lowest = *best.last().expect("non-empty");
        if loss < lowest {
            best_field = store.get(id).clone();
        }
        best.push(lowest.min(loss));
        rising = if loss > prev { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_PATIENCE {
            diverged = true;
            break;
        }
    }
    Ok(ClassicalResult {
        field: RegistrationField::new(best_field)?,
        losses,
        best,
        diverged,
    })
}
