//! 2D convolution and its adjoint via im2col + GEMM.
//!
//! Weights follow the cross-correlation convention. `conv2d` takes
//! `[O, C, k, k]`; `transposed_conv2d` takes `[C_in, C_out, k, k]`, so the
//! same tensor drives a convolution and its exact adjoint.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Geometry of a convolution from a `[c, h, w]` grid to a `[_, ho, wo]` grid.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Geom { c, h, w, k, stride, pad, ho, wo })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits `(row, col, input offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncols = self.cols();
        for c in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + iy as usize) * self.w + ix as usize;
                            f(row * ncols + oy * self.wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<'a, T: Float>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
        Cow::Owned(cols)
    }

    fn col2im<T: Float>(&self, cols: &[T], x: &mut [T]) {
        if self.is_pointwise() {
            x.iter_mut().zip(cols).for_each(|(d, &s)| *d += s);
            return;
        }
        self.for_each_tap(|src, dst| x[dst] += cols[src]);
    }
}

fn check_rank4(op: &'static str, t: &Tensor<impl Float>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::invalid(op, format!("expected a rank-4 tensor, got {:?}", t.shape()))),
    }
}

fn bias_shape_ok(bias: &Option<Var<'_, impl Float>>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        let s = b.shape();
        if s != [n] {
            return Err(Error::shape("conv bias", &[n], &s));
        }
    }
    Ok(())
}

/// Sums per-sample partial gradients in batch order.
fn sum_ordered<T: Float>(parts: &[Vec<T>], len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
    }
    acc
}

fn bias_grad<T: Float>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    db
}

impl<'g, T: Float> Var<'g, T> {
    /// `x: [B, C, H, W]`, `w: [O, C, k, k]`, optional `bias: [O]`; zero padding.
    pub fn conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let wt = w.value();
        let [bsz, c, h, wd] = check_rank4("conv2d", &x)?;
        let [o, wc, kh, kw] = check_rank4("conv2d", &wt)?;
        if wc != c || kh != kw {
            return Err(Error::shape("conv2d", x.shape(), wt.shape()));
        }
        bias_shape_ok(&bias, o)?;
        let geom = Geom::new(c, h, wd, kh, stride, pad)?;
        let (rows, ncols) = (geom.rows(), geom.cols());
        let in_plane = c * h * wd;

        let mut out = vec![T::zero(); bsz * o * ncols];
        let (xs, ws) = (x.data(), wt.data());
        out.par_chunks_mut(o * ncols).enumerate().for_each(|(b, ob)| {
            let cols = geom.im2col(&xs[b * in_plane..(b + 1) * in_plane]);
            T::gemm(o, rows, ncols, ws, false, &cols, false, ob, false);
        });
        if let Some(bv) = &bias {
            let bv = bv.value();
            for (i, chunk) in out.chunks_mut(ncols).enumerate() {
                let v = bv.data()[i % o];
                chunk.iter_mut().for_each(|e| *e += v);
            }
        }
        let out = Tensor::from_parts(vec![bsz, o, geom.ho, geom.wo], out);

        let mut inputs = vec![self, w];
        inputs.extend(bias);
        Ok(self.graph().record(
            out,
            &inputs,
            Box::new(move |ctx| {
                let (x, wt, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..bsz)
                    .into_par_iter()
                    .map(|b| {
                        let gb = &g.data()[b * o * ncols..(b + 1) * o * ncols];
                        let mut dx = Vec::new();
                        let mut dw = Vec::new();
                        if ctx.needs[1] {
                            let cols = geom.im2col(&x.data()[b * in_plane..(b + 1) * in_plane]);
                            dw = vec![T::zero(); o * rows];
                            T::gemm(o, ncols, rows, gb, false, &cols, true, &mut dw, false);
                        }
                        if ctx.needs[0] {
                            let mut dcols = vec![T::zero(); rows * ncols];
                            T::gemm(rows, o, ncols, wt.data(), true, gb, false, &mut dcols, false);
                            dx = vec![T::zero(); in_plane];
                            geom.col2im(&dcols, &mut dx);
                        }
                        (dx, dw)
                    })
                    .collect();
                let mut grads = vec![None, None];
                if ctx.needs[0] {
                    let dx: Vec<T> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
                    grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if ctx.needs[1] {
                    let dws: Vec<Vec<T>> = parts.into_iter().map(|p| p.1).collect();
                    grads[1] = Some(Tensor::from_parts(wt.shape().to_vec(), sum_ordered(&dws, o * rows)));
                }
                if ctx.inputs.len() == 3 {
                    grads.push(Some(Tensor::from_parts(vec![o], bias_grad(g.data(), o, ncols))));
                }
                grads
            }),
        ))
    }

    /// Adjoint of [`Var::conv2d`] with the same `(k, stride, pad)`, mapping
    /// `[B, C_in, H, W]` to `[B, C_out, stride·H, stride·W]`. The geometry must
    /// be such that the forward convolution maps `stride·H` back to `H`.
    pub fn transposed_conv2d(
        self,
        w: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let wt = w.value();
        let [bsz, ci, h, wd] = check_rank4("transposed_conv2d", &x)?;
        let [wci, co, kh, kw] = check_rank4("transposed_conv2d", &wt)?;
        if wci != ci || kh != kw {
            return Err(Error::shape("transposed_conv2d", x.shape(), wt.shape()));
        }
        bias_shape_ok(&bias, co)?;
        let (ho, wo) = (stride * h, stride * wd);
        let geom = Geom::new(co, ho, wo, kh, stride, pad)?;
        if geom.ho != h || geom.wo != wd {
            return Err(Error::invalid(
                "transposed_conv2d",
                format!("kernel {kh}, stride {stride}, pad {pad} do not invert a {h}x{wd} -> {ho}x{wo} upsampling"),
            ));
        }
        let (rows, ncols) = (geom.rows(), geom.cols());
        let in_plane = ci * ncols;
        let out_plane = co * ho * wo;

        let mut out = vec![T::zero(); bsz * out_plane];
        let (xs, ws) = (x.data(), wt.data());
        out.par_chunks_mut(out_plane).enumerate().for_each(|(b, ob)| {
            let mut cols = vec![T::zero(); rows * ncols];
            T::gemm(rows, ci, ncols, ws, true, &xs[b * in_plane..], false, &mut cols, false);
            geom.col2im(&cols, ob);
        });
        if let Some(bv) = &bias {
            let bv = bv.value();
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let v = bv.data()[i % co];
                chunk.iter_mut().for_each(|e| *e += v);
            }
        }
        let out = Tensor::from_parts(vec![bsz, co, ho, wo], out);

        let mut inputs = vec![self, w];
        inputs.extend(bias);
        Ok(self.graph().record(
            out,
            &inputs,
            Box::new(move |ctx| {
                let (x, wt, g) = (ctx.input(0), ctx.input(1), ctx.grad);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..bsz)
                    .into_par_iter()
                    .map(|b| {
                        let dcols = geom.im2col(&g.data()[b * out_plane..(b + 1) * out_plane]);
                        let mut dx = Vec::new();
                        let mut dw = Vec::new();
                        if ctx.needs[0] {
                            dx = vec![T::zero(); in_plane];
                            T::gemm(ci, rows, ncols, wt.data(), false, &dcols, false, &mut dx, false);
                        }
                        if ctx.needs[1] {
                            dw = vec![T::zero(); ci * rows];
                            let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                            T::gemm(ci, ncols, rows, xb, false, &dcols, true, &mut dw, false);
                        }
                        (dx, dw)
                    })
                    .collect();
                let mut grads = vec![None, None];
                if ctx.needs[0] {
                    let dx: Vec<T> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
                    grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if ctx.needs[1] {
                    let dws: Vec<Vec<T>> = parts.into_iter().map(|p| p.1).collect();
                    grads[1] = Some(Tensor::from_parts(wt.shape().to_vec(), sum_ordered(&dws, ci * rows)));
                }
                if ctx.inputs.len() == 3 {
                    grads.push(Some(Tensor::from_parts(vec![co], bias_grad(g.data(), co, ho * wo))));
                }
                grads
            }),
        ))
    }
}
