use crate::error::{Error, Result};
use crate::tensor::{numel, ops::all, Float, Tensor, Var};

/// Centered running sum of odd length `window` along `axis`; samples outside
/// the tensor count as zero.
fn window_sum<T: Float>(x: &Tensor<T>, axis: usize, window: usize) -> Tensor<T> {
    let s = x.shape();
    let (outer, n, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
    let r = window / 2;
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            // prefix sums keep this O(n) per line
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(T::zero());
            for k in 0..n {
                let last = *prefix.last().expect("non-empty");
                prefix.push(last + x.data()[at(k)]);
            }
            for k in 0..n {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(n);
                out[at(k)] = prefix[hi] - prefix[lo];
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

impl<'g, T: Float> Var<'g, T> {
    /// Sum over a centered `window`-wide box on every axis from `first_axis`
    /// onward, with zero padding.
    pub fn box_sum(self, first_axis: usize, window: usize) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if window % 2 == 0 || first_axis >= rank {
            return Err(Error::invalid(
                "box_sum",
                format!("window {window} must be odd and axis {first_axis} < rank {rank}"),
            ));
        }
        let mut v = self;
        for axis in first_axis..rank {
            let out = window_sum(&v.value(), axis, window);
            // the zero-padded centered box is self-adjoint
            v = self
                .graph()
                .record(out, &[v], Box::new(move |ctx| all([window_sum(ctx.grad, axis, window)])));
        }
        Ok(v)
    }
}
