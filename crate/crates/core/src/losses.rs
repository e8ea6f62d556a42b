//! The joint training objective: noise-prediction error plus a weighted
//! registration term (negative local NCC and field smoothness).

use crate::error::{Error, Result};
use crate::nets::{Bound, Model};
use crate::tensor::{Float, Tensor, Var};
use crate::warp::{field_gradient_energy, warp};

/// Variance stabilizer in the NCC denominator.
pub const NCC_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the registration term.
    pub lambda: f64,
    /// Weight of the smoothness penalty inside the registration term.
    pub lambda_phi: f64,
    /// Odd NCC window width.
    pub ncc_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 2.0,
            lambda_phi: 1.0,
            ncc_window: 9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("loss weights", format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.lambda_phi >= 0.0 && self.lambda_phi.is_finite()) {
            return Err(Error::invalid(
                "loss weights",
                format!("lambda_phi {} must be >= 0", self.lambda_phi),
            ));
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::invalid(
                "loss weights",
                format!("ncc_window {} must be odd and >= 3", self.ncc_window),
            ));
        }
        Ok(())
    }
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<'g, T: Float>(eps_hat: Var<'g, T>, eps: Var<'g, T>) -> Result<Var<'g, T>> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::shape("diffusion_loss", &eps_hat.shape(), &eps.shape()));
    }
    Ok(eps_hat.sub(eps)?.square().mean_all())
}

/// Maps `[-1, 1]` intensities to `[0, 1]`.
pub fn rescale01<'g, T: Float>(x: Var<'g, T>) -> Var<'g, T> {
    x.add_scalar(1.0).mul_scalar(0.5)
}

/// Mean over voxels of the squared local correlation coefficient between
/// `a` and `b` (`[B, C, spatial...]`), using centered `window`-wide boxes
/// clipped to the image.
pub fn local_ncc<'g, T: Float>(a: Var<'g, T>, b: Var<'g, T>, window: usize) -> Result<Var<'g, T>> {
    let s = a.shape();
    if b.shape() != s {
        return Err(Error::shape("local_ncc", &s, &b.shape()));
    }
    if s.len() < 3 || window % 2 == 0 || s[2..].iter().any(|&n| n < window) {
        return Err(Error::invalid(
            "local_ncc",
            format!("window {window} must be odd and fit inside spatial extents of {s:?}"),
        ));
    }
    let g = a.graph();
    // Shifting by the global mean changes no correlation but keeps the
    // window sums small, which avoids cancellation below.
    let center = |x: Var<'g, T>| {
        let mean = x.value().data().iter().map(|v| v.as_f64()).sum::<f64>() / x.value().numel() as f64;
        x.add_scalar(-mean)
    };
    let (a, b) = (center(a), center(b));
    let boxed = |x: Var<'g, T>| x.box_sum(2, window);
    let count = g.constant(Tensor::ones(s.clone())).box_sum(2, window)?;
    let (sa, sb) = (boxed(a)?, boxed(b)?);
    let saa = boxed(a.square())?;
    let sbb = boxed(b.square())?;
    let sab = boxed(a.mul(b)?)?;
    let cross = sab.sub(sa.mul(sb)?.div(count)?)?;
    let var_a = saa.sub(sa.square().div(count)?)?;
    let var_b = sbb.sub(sb.square().div(count)?)?;
    let cc = cross.square().div(var_a.mul(var_b)?.add_scalar(NCC_EPS))?;
    Ok(cc.mean_all())
}

/// Negative NCC of the warped moving image against the fixed image, both
/// rescaled to `[0, 1]`, plus the weighted smoothness penalty.
pub fn registration_loss<'g, T: Float>(
    moving: Var<'g, T>,
    fixed: Var<'g, T>,
    field: Var<'g, T>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    let warped = warp(rescale01(moving), field)?;
    let sim = local_ncc(warped, rescale01(fixed), w.ncc_window)?;
    let smooth = field_gradient_energy(field)?;
    sim.neg().add(smooth.mul_scalar(w.lambda_phi))
}

/// The parts of the joint objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'g, T: Float> {
    pub diffusion: Var<'g, T>,
    pub registration: Var<'g, T>,
    pub total: Var<'g, T>,
    pub eps_hat: Var<'g, T>,
    pub field: Var<'g, T>,
}

/// `diffusion + lambda · registration`.
pub fn combine<'g, T: Float>(diffusion: Var<'g, T>, registration: Var<'g, T>, lambda: f64) -> Result<Var<'g, T>> {
    if lambda == 0.0 {
        return Ok(diffusion);
    }
    diffusion.add(registration.mul_scalar(lambda))
}

/// Joint objective. `x_t` must be the fixed image noised to steps `ts` with
/// noise `eps`; the same noise prediction conditions the deformation
/// network.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'g, T: Float>(
    model: &Model,
    p: &Bound<'g, T>,
    moving: Var<'g, T>,
    fixed: Var<'g, T>,
    x_t: Var<'g, T>,
    ts: &[usize],
    eps: Var<'g, T>,
    w: &LossWeights,
) -> Result<LossTerms<'g, T>> {
    let eps_hat = model.score.forward(p, moving, fixed, x_t, ts)?;
    let field = model.deform.forward(p, moving, eps_hat)?;
    let diffusion = diffusion_loss(eps_hat, eps)?;
    let registration = registration_loss(moving, fixed, field, w)?;
    let total = combine(diffusion, registration, w.lambda)?;
    Ok(LossTerms {
        diffusion,
        registration,
        total,
        eps_hat,
        field,
    })
}
