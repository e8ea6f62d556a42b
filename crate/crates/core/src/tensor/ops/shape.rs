use crate::error::{Error, Result};
use crate::tensor::{numel, ops::all, Float, Tensor, Var};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub(crate) fn concat_values<T: Float>(parts: &[&Tensor<T>], axis: usize, rank: usize) -> Result<Tensor<T>> {
    if axis >= rank {
        return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let first = parts[0].shape();
    for p in parts {
        let s = p.shape();
        if s.len() != rank || s.iter().zip(first).enumerate().any(|(k, (a, b))| k != axis && a != b) {
            return Err(Error::shape("concat", first, s));
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, inner) = outer_inner(first, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn narrow_value<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("range {start}..{} on axis {axis} of shape {:?}", start + len, x.shape()),
        ));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let d = x.shape()[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * d + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

impl<'g, T: Float> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let in_shape = x.shape().to_vec();
        Ok(self.graph().record(
            out,
            &[self],
            Box::new(move |ctx| all([Tensor::from_parts(in_shape.clone(), ctx.grad.data().to_vec())])),
        ))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let out = concat_values(&refs, axis, refs[0].rank())?;
        let extents: Vec<usize> = refs.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.graph().record(
            out,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                extents
                    .iter()
                    .zip(ctx.needs)
                    .map(|(&len, &need)| {
                        let g = need.then(|| narrow_value(ctx.grad, axis, start, len).expect("in range"));
                        start += len;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = narrow_value(&x, axis, start, len)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph().record(
            out,
            &[self],
            Box::new(move |ctx| {
                let (outer, inner) = outer_inner(&in_shape, axis);
                let d = in_shape[axis];
                let mut dx = vec![T::zero(); numel(&in_shape)];
                let g = ctx.grad.data();
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * d + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                all([Tensor::from_parts(in_shape.clone(), dx)])
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(Error::invalid("transpose", format!("rank {r} < 2")));
        }
        let out = transpose_last2(&x);
        Ok(self
            .graph()
            .record(out, &[self], Box::new(|ctx| all([transpose_last2(ctx.grad)]))))
    }

    /// Nearest-neighbour ×2 upsampling of the two trailing spatial axes.
    pub fn nearest_upsample2(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::invalid("nearest_upsample2", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        let in_shape = s.to_vec();
        Ok(self.graph().record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                all([Tensor::from_parts(in_shape.clone(), dx)])
            }),
        ))
    }

    /// Adds a per-(batch, channel) vector `[B, C]` to every spatial position
    /// of `self: [B, C, ...]`.
    pub fn add_channelwise(self, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let e = v.value();
        let s = x.shape();
        if s.len() < 2 || e.shape() != &s[..2] {
            return Err(Error::shape("add_channelwise", s, e.shape()));
        }
        let plane = numel(&s[2..]);
        let mut out = x.data().to_vec();
        for (chunk, &ev) in out.chunks_mut(plane).zip(e.data()) {
            chunk.iter_mut().for_each(|o| *o += ev);
        }
        let e_shape = e.shape().to_vec();
        Ok(self.graph().record(
            Tensor::from_parts(s.to_vec(), out),
            &[self, v],
            Box::new(move |ctx| {
                let de = ctx.grad.data().chunks(plane).map(|c| c.iter().copied().sum()).collect();
                vec![Some(ctx.grad.clone()), Some(Tensor::from_parts(e_shape.clone(), de))]
            }),
        ))
    }

    /// Adds a vector along `axis` (e.g. a bias over the feature axis).
    pub fn add_bias(self, b: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let bv = b.value();
        let s = x.shape();
        if axis >= s.len() || bv.shape() != [s[axis]] {
            return Err(Error::shape("add_bias", s, bv.shape()));
        }
        let (_, inner) = outer_inner(s, axis);
        let d = s[axis];
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[(i / inner) % d])
            .collect();
        let b_shape = bv.shape().to_vec();
        Ok(self.graph().record(
            Tensor::from_parts(s.to_vec(), out),
            &[self, b],
            Box::new(move |ctx| {
                let mut db = vec![T::zero(); d];
                for (i, &g) in ctx.grad.data().iter().enumerate() {
                    db[(i / inner) % d] += g;
                }
                vec![Some(ctx.grad.clone()), Some(Tensor::from_parts(b_shape.clone(), db))]
            }),
        ))
    }
}

fn transpose_last2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batch = x.numel() / (m * n);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}
