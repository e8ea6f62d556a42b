use rand::Rng;

use super::params::{Bound, Init, ParamId};
use crate::error::Result;
use crate::tensor::{Float, Var};

/// Largest group count not above `preferred` that divides `channels`.
pub(crate) fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            w: init.fan_in("w", &[cout, cin, k, k], cin * k * k),
            b: init.constant("b", &[cout], 0.0),
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            w: init.constant("w", &[cout, cin, k, k], 0.0),
            b: init.constant("b", &[cout], 0.0),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution doubling the spatial size.
#[derive(Debug, Clone)]
pub struct UpConv {
    w: ParamId,
    b: ParamId,
}

impl UpConv {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize) -> Self {
        UpConv {
            w: init.fan_in("w", &[cin, cout, 3, 3], cin * 9 / 4),
            b: init.constant("b", &[cout], 0.0),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.transposed_conv2d(p.get(self.w), Some(p.get(self.b)), 2, 1)
    }
}

/// `x · W + b` over `x: [B, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, fin: usize, fout: usize) -> Self {
        Linear {
            w: init.fan_in("w", &[fin, fout], fin),
            b: init.constant("b", &[fout], 0.0),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(p.get(self.w))?.add_bias(p.get(self.b), 1)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
            groups: groups_for(channels, groups),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.group_norm(self.groups, p.get(self.gamma), p.get(self.beta))
    }
}

/// Pre-activation residual block conditioned on a time embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(&mut init.scope("norm1"), cin, groups),
            conv1: Conv::new(&mut init.scope("conv1"), cin, cout, 3, 1),
            time: Linear::new(&mut init.scope("time"), tdim, cout),
            norm2: GroupNorm::new(&mut init.scope("norm2"), cout, groups),
            conv2: Conv::new(&mut init.scope("conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(&mut init.scope("skip"), cin, cout, 1, 1)),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, temb: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(p, self.norm1.forward(p, x)?.swish())?;
        let h = h.add_channelwise(self.time.forward(p, temb.swish())?)?;
        let h = self.conv2.forward(p, self.norm2.forward(p, h)?.swish())?;
        let shortcut = match &self.skip {
            Some(c) => c.forward(p, x)?,
            None => x,
        };
        h.add(shortcut)
    }
}

/// Single-head scaled dot-product self-attention over spatial positions.
#[derive(Debug, Clone)]
pub struct Attention {
    norm: GroupNorm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
}

impl Attention {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, groups: usize) -> Self {
        Attention {
            norm: GroupNorm::new(&mut init.scope("norm"), channels, groups),
            q: Conv::new(&mut init.scope("q"), channels, channels, 1, 1),
            k: Conv::new(&mut init.scope("k"), channels, channels, 1, 1),
            v: Conv::new(&mut init.scope("v"), channels, channels, 1, 1),
            out: Conv::new(&mut init.scope("out"), channels, channels, 1, 1),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(p, x)?;
        let flat = |conv: &Conv| conv.forward(p, h)?.reshape(&[b, c, n]);
        let (q, k, v) = (flat(&self.q)?, flat(&self.k)?, flat(&self.v)?);
        // weights[i, j] = softmax_j(q_i · k_j / sqrt(c))
        let weights = q
            .transpose()?
            .matmul(k)?
            .mul_scalar(1.0 / (c as f64).sqrt())
            .softmax();
        let mixed = v.matmul(weights.transpose()?)?.reshape(&s)?;
        x.add(self.out.forward(p, mixed)?)
    }
}

/// Sinusoidal code of each step in `ts`, `[B, dim]`: sines then cosines
/// over geometrically spaced frequencies.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (row, &t) in out.chunks_mut(dim).zip(ts) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.sin();
            row[half + i] = a.cos();
        }
    }
    out
}

/// Sinusoidal code followed by a two-layer swish projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, dim: usize) -> Self {
        TimeEmbedding {
            dim,
            fc1: Linear::new(&mut init.scope("fc1"), dim, dim),
            fc2: Linear::new(&mut init.scope("fc2"), dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, graph: &'g crate::tensor::Graph<T>, ts: &[usize]) -> Result<Var<'g, T>> {
        let code = sinusoidal_embedding(ts, self.dim);
        let code = crate::tensor::Tensor::from_fn([ts.len(), self.dim], |i| T::of(code[i]));
        let h = self.fc1.forward(p, graph.constant(code))?.swish();
        self.fc2.forward(p, h)
    }
}
