use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Variance stabilizer inside group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<'g, T: Float> Var<'g, T> {
    /// Group normalization of `[B, C, ...]` with per-channel affine `gamma`,
    /// `beta` of shape `[C]`.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("group_norm", format!("expected [B, C, ...], got {s:?}")));
        }
        let (bsz, c) = (s[0], s[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("group_norm", &[c], gv.shape()));
        }
        let plane: usize = s[2..].iter().product();
        let cpg = c / groups;
        let span = cpg * plane;
        let eps = T::of(GROUP_NORM_EPS);

        // normalized values and per-(batch, group) inverse std
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); bsz * groups];
        xhat.par_chunks_mut(span)
            .zip(inv_std.par_iter_mut())
            .zip(x.data().par_chunks(span))
            .for_each(|((xh, is), xs)| {
                let n = T::of(span as f64);
                let mean = xs.iter().copied().sum::<T>() / n;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                *is = T::one() / (var + eps).sqrt();
                xh.iter_mut().zip(xs).for_each(|(h, &v)| *h = (v - mean) * *is);
            });
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / plane) % c;
                h * gv.data()[ch] + bv.data()[ch]
            })
            .collect();

        Ok(self.graph().record(
            Tensor::from_parts(s.clone(), out),
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let (gamma, g) = (ctx.input(1), ctx.grad.data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (&gi, &h)) in g.iter().zip(&xhat).enumerate() {
                    let ch = (i / plane) % c;
                    dgamma[ch] += gi * h;
                    dbeta[ch] += gi;
                }
                let mut dx = vec![T::zero(); xhat.len()];
                if ctx.needs[0] {
                    let n = T::of(span as f64);
                    dx.par_chunks_mut(span).enumerate().for_each(|(grp, dxs)| {
                        let base = grp * span;
                        let first_ch = (grp % groups) * cpg;
                        let dxhat = |j: usize| g[base + j] * gamma.data()[first_ch + j / plane];
                        let mut sum = T::zero();
                        let mut dot = T::zero();
                        for j in 0..span {
                            let d = dxhat(j);
                            sum += d;
                            dot += d * xhat[base + j];
                        }
                        let is = inv_std[grp];
                        for (j, out) in dxs.iter_mut().enumerate() {
                            *out = is / n * (n * dxhat(j) - sum - xhat[base + j] * dot);
                        }
                    });
                }
                vec![
                    Some(Tensor::from_parts(s.clone(), dx)),
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        ))
    }
}
