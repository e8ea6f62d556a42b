use crate::error::{Error, Result};
use crate::tensor::{ops::all, Float, Tensor, Var};

/// Batched product over a shared leading batch extent (1 for plain matmul).
fn batched<T: Float>(a: &Tensor<T>, b: &Tensor<T>, batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            false,
            &b.data()[i * k * n..],
            false,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    out
}

impl<'g, T: Float> Var<'g, T> {
    /// `[M, K] · [K, N]`, or `[B, M, K] · [B, K, N]` batched.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::from_parts(out_shape, batched(&a, &b, batch, m, k, n));
        Ok(self.graph().record(
            out,
            &[self, rhs],
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let mut da = vec![T::zero(); a.numel()];
                let mut db = vec![T::zero(); b.numel()];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    if ctx.needs[0] {
                        // dA = dC · Bᵀ
                        T::gemm(m, n, k, gi, false, &b.data()[i * k * n..], true, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    if ctx.needs[1] {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, &a.data()[i * m * k..], true, gi, false, &mut db[i * k * n..(i + 1) * k * n], false);
                    }
                }
                all([
                    Tensor::from_parts(a.shape().to_vec(), da),
                    Tensor::from_parts(b.shape().to_vec(), db),
                ])
            }),
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.graph().record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                all([Tensor::from_parts(ctx.output.shape().to_vec(), dx)])
            }),
        )
    }
}
