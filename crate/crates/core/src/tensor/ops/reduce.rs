use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient flows to the first (lowest linear index) maximal element.
    Max,
}

/// Maps each input linear index to its output linear index when `axes` are
/// reduced away.
fn output_index_map(shape: &[usize], axes: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(axes)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        let mut o = 0;
        for (k, &i) in idx.iter().enumerate() {
            if !axes[k] {
                o = o * shape[k] + i;
            }
        }
        *slot = o;
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    (out_shape, map)
}

impl<'g, T: Float> Var<'g, T> {
    /// Reduces over `axes`, dropping them from the shape.
    pub fn reduce(self, kind: ReduceKind, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid("reduce", format!("axis {a} out of range for rank {rank}")));
            }
            mask[a] = true;
        }
        let (out_shape, map) = output_index_map(x.shape(), &mask);
        let m: usize = out_shape.iter().product();
        let group = x.numel() / m;

        let mut out = vec![T::zero(); m];
        let mut argmax = vec![usize::MAX; m];
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += x.data()[i];
                }
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::of(group as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                for (i, &o) in map.iter().enumerate() {
                    let v = x.data()[i];
                    if argmax[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
                if let Some(codes) = self.graph().piece_codes(|| argmax.iter().map(|&i| i as u64).collect()) {
                    argmax = codes.iter().map(|&i| i as usize).collect();
                    for (o, &i) in argmax.iter().enumerate() {
                        out[o] = x.data()[i];
                    }
                }
            }
        }

        let in_shape = x.shape().to_vec();
        Ok(self.graph().record(
            Tensor::from_parts(out_shape, out),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); map.len()];
                match kind {
                    ReduceKind::Sum => dx.iter_mut().zip(&map).for_each(|(d, &o)| *d = g[o]),
                    ReduceKind::Mean => {
                        let inv = T::one() / T::of(group as f64);
                        dx.iter_mut().zip(&map).for_each(|(d, &o)| *d = g[o] * inv);
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            dx[i] = g[o];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            }),
        ))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes).expect("axes in range")
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes).expect("axes in range")
    }
}
