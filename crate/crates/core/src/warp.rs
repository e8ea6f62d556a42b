//! Spatial transformation layer and deformation-field diagnostics.
//!
//! Fields are displacements in voxel units, laid out `[B, D, spatial...]`
//! where channel `i` moves along spatial axis `i` (axis 0 is rows). Warping
//! samples the image at `x + u(x)`, so the zero field is the identity.
//! Sample coordinates are clamped to the image border.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Displacement field `[B, D, spatial...]` in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationField(Tensor<f32>);

impl RegistrationField {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        check_field_shape(t.shape())?;
        if !t.all_finite() {
            return Err(Error::NonFinite("registration field".into()));
        }
        Ok(RegistrationField(t))
    }

    pub fn zeros(batch: usize, spatial: &[usize]) -> Self {
        let mut shape = vec![batch, spatial.len()];
        shape.extend_from_slice(spatial);
        RegistrationField(Tensor::zeros(shape))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.0.shape()[2..]
    }

    pub fn fold_fraction(&self) -> Result<f64> {
        jacobian_fold_fraction(&self.0)
    }
}

fn check_field_shape(s: &[usize]) -> Result<usize> {
    let d = s.len().checked_sub(2).unwrap_or(0);
    if !(2..=3).contains(&d) || s[1] != d {
        return Err(Error::invalid(
            "field",
            format!("expected [B, D, spatial...] with D = 2 or 3 spatial axes, got {s:?}"),
        ));
    }
    Ok(d)
}

/// Per-voxel interpolation stencil along every spatial axis.
#[derive(Clone, Copy)]
struct Stencil {
    lo: [usize; 3],
    hi: [usize; 3],
    frac: [f64; 3],
    inside: [bool; 3],
}

struct Grid {
    dims: usize,
    spatial: [usize; 3],
    strides: [usize; 3],
    voxels: usize,
}

impl Grid {
    fn new(spatial: &[usize]) -> Self {
        let mut sp = [1usize; 3];
        sp[..spatial.len()].copy_from_slice(spatial);
        let mut strides = [0usize; 3];
        let mut acc = 1;
        for a in (0..spatial.len()).rev() {
            strides[a] = acc;
            acc *= sp[a];
        }
        Grid {
            dims: spatial.len(),
            spatial: sp,
            strides,
            voxels: acc,
        }
    }

    fn coords(&self, mut v: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..self.dims {
            c[a] = v / self.strides[a];
            v %= self.strides[a];
        }
        c
    }

    /// Stencils for every `(batch, voxel)`, optionally forced onto the
    /// interpolation cells and clamp states encoded in `frozen`.
    fn stencils<T: Float>(&self, field: &[T], batch: usize, frozen: Option<&[u64]>) -> Vec<Stencil> {
        let mut out = Vec::with_capacity(batch * self.voxels);
        for b in 0..batch {
            for v in 0..self.voxels {
                let mut s = self.stencil(field, b, v);
                if let Some(codes) = frozen {
                    let c = self.coords(v);
                    for a in 0..self.dims {
                        let code = codes[(b * self.voxels + v) * self.dims + a];
                        let raw = c[a] as f64 + field[(b * self.dims + a) * self.voxels + v].as_f64();
                        s.inside[a] = code & 1 == 1;
                        s.lo[a] = (code >> 1) as usize;
                        s.hi[a] = (s.lo[a] + 1).min(self.spatial[a] - 1);
                        // a clamped coordinate stays pinned to the border it was clamped to
                        let p = if s.inside[a] { raw } else { s.lo[a] as f64 };
                        s.frac[a] = p - s.lo[a] as f64;
                    }
                }
                out.push(s);
            }
        }
        out
    }

    fn codes(&self, stencils: &[Stencil]) -> Vec<u64> {
        let d = self.dims;
        stencils
            .iter()
            .flat_map(|s| (0..d).map(move |a| (s.lo[a] as u64) << 1 | u64::from(s.inside[a])))
            .collect()
    }

    fn stencil<T: Float>(&self, field: &[T], b: usize, v: usize) -> Stencil {
        let c = self.coords(v);
        let mut s = Stencil {
            lo: [0; 3],
            hi: [0; 3],
            frac: [0.0; 3],
            inside: [false; 3],
        };
        for a in 0..self.dims {
            let top = (self.spatial[a] - 1) as f64;
            let raw = c[a] as f64 + field[(b * self.dims + a) * self.voxels + v].as_f64();
            let p = raw.clamp(0.0, top);
            let lo = p.floor();
            s.lo[a] = lo as usize;
            s.hi[a] = (s.lo[a] + 1).min(self.spatial[a] - 1);
            s.frac[a] = p - lo;
            s.inside[a] = (0.0..=top).contains(&raw);
        }
        s
    }

    /// Calls `f(offset, weight, corner)` for each of the `2^D` corners.
    #[inline]
    fn corners(&self, s: &Stencil, mut f: impl FnMut(usize, f64, usize)) {
        for corner in 0..(1usize << self.dims) {
            let mut off = 0;
            let mut w = 1.0;
            for a in 0..self.dims {
                if corner >> a & 1 == 1 {
                    off += s.hi[a] * self.strides[a];
                    w *= s.frac[a];
                } else {
                    off += s.lo[a] * self.strides[a];
                    w *= 1.0 - s.frac[a];
                }
            }
            f(off, w, corner);
        }
    }
}

fn check_pair(image: &[usize], field: &[usize]) -> Result<usize> {
    let d = check_field_shape(field)?;
    if image.len() != field.len() || image[0] != field[0] || image[2..] != field[2..] {
        return Err(Error::shape("warp", image, field));
    }
    Ok(d)
}

/// Differentiable bi-/tri-linear warp of `image: [B, C, spatial...]` by
/// `field: [B, D, spatial...]`.
pub fn warp<'g, T: Float>(image: Var<'g, T>, field: Var<'g, T>) -> Result<Var<'g, T>> {
    let img = image.value();
    let fld = field.value();
    check_pair(img.shape(), fld.shape())?;
    let (bsz, ch) = (img.shape()[0], img.shape()[1]);
    let grid = Grid::new(&img.shape()[2..]);
    let nv = grid.voxels;

    let mut stencils = grid.stencils(fld.data(), bsz, None);
    if let Some(codes) = image.graph().piece_codes(|| grid.codes(&stencils)) {
        stencils = grid.stencils(fld.data(), bsz, Some(&codes));
    }
    let mut out = vec![T::zero(); img.numel()];
    for b in 0..bsz {
        for v in 0..nv {
            let s = &stencils[b * nv + v];
            for c in 0..ch {
                let plane = &img.data()[(b * ch + c) * nv..(b * ch + c + 1) * nv];
                let mut acc = 0.0;
                grid.corners(s, |off, w, _| acc += w * plane[off].as_f64());
                out[(b * ch + c) * nv + v] = T::of(acc);
            }
        }
    }

    Ok(image.graph().record(
        Tensor::from_parts(img.shape().to_vec(), out),
        &[image, field],
        Box::new(move |ctx| {
            let (img, fld, g) = (ctx.input(0), ctx.input(1), ctx.grad.data());
            let mut di = vec![T::zero(); img.numel()];
            let mut du = vec![T::zero(); fld.numel()];
            let d = grid.dims;
            for b in 0..bsz {
                for v in 0..nv {
                    let s = &stencils[b * nv + v];
                    let mut dpos = [0.0f64; 3];
                    for c in 0..ch {
                        let base = (b * ch + c) * nv;
                        let gv = g[base + v].as_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        grid.corners(s, |off, w, corner| {
                            if ctx.needs[0] {
                                di[base + off] += T::of(gv * w);
                            }
                            if ctx.needs[1] {
                                let iv = img.data()[base + off].as_f64();
                                for (a, dp) in dpos.iter_mut().enumerate().take(d) {
                                    if !s.inside[a] {
                                        continue;
                                    }
                                    // weight with axis a's factor replaced by ±1
                                    let mut wo = 1.0;
                                    for k in 0..d {
                                        if k == a {
                                            continue;
                                        }
                                        wo *= if corner >> k & 1 == 1 { s.frac[k] } else { 1.0 - s.frac[k] };
                                    }
                                    let sign = if corner >> a & 1 == 1 { 1.0 } else { -1.0 };
                                    *dp += gv * iv * wo * sign;
                                }
                            }
                        });
                    }
                    for (a, &dp) in dpos.iter().enumerate().take(d) {
                        du[(b * d + a) * nv + v] = T::of(dp);
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(img.shape().to_vec(), di)),
                Some(Tensor::from_parts(fld.shape().to_vec(), du)),
            ]
        }),
    ))
}

/// Warps a tensor directly, without recording a graph.
pub fn warp_tensor(image: &Tensor<f32>, field: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = crate::tensor::Graph::new();
    let out = warp(g.constant(image.clone()), g.constant(field.clone()))?;
    Ok((*out.value()).clone())
}

/// Nearest-neighbour warp; binary masks stay binary.
pub fn warp_nearest(image: &Tensor<f32>, field: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_pair(image.shape(), field.shape())?;
    let (bsz, ch) = (image.shape()[0], image.shape()[1]);
    let grid = Grid::new(&image.shape()[2..]);
    let nv = grid.voxels;
    let mut out = vec![0.0f32; image.numel()];
    for b in 0..bsz {
        for v in 0..nv {
            let s = grid.stencil(field.data(), b, v);
            let mut off = 0;
            for a in 0..grid.dims {
                let idx = if s.frac[a] >= 0.5 { s.hi[a] } else { s.lo[a] };
                off += idx * grid.strides[a];
            }
            for c in 0..ch {
                out[(b * ch + c) * nv + v] = image.data()[(b * ch + c) * nv + off];
            }
        }
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

fn det(j: &[[f64; 3]; 3], d: usize) -> f64 {
    if d == 2 {
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    } else {
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    }
}

/// Fraction of interior voxels whose deformation Jacobian `I + ∇u`
/// (central differences) has a non-positive determinant.
pub fn jacobian_fold_fraction(field: &Tensor<f32>) -> Result<f64> {
    let d = check_field_shape(field.shape())?;
    let spatial = &field.shape()[2..];
    if spatial.iter().any(|&n| n < 3) {
        return Err(Error::invalid(
            "jacobian_fold_fraction",
            format!("every spatial extent must be at least 3, got {spatial:?}"),
        ));
    }
    let grid = Grid::new(spatial);
    let nv = grid.voxels;
    let u = field.data();
    let (mut folds, mut total) = (0usize, 0usize);
    for b in 0..field.shape()[0] {
        for v in 0..nv {
            let c = grid.coords(v);
            if (0..d).any(|a| c[a] == 0 || c[a] + 1 == grid.spatial[a]) {
                continue;
            }
            let mut j = [[0.0f64; 3]; 3];
            for (i, row) in j.iter_mut().enumerate().take(d) {
                let comp = &u[(b * d + i) * nv..(b * d + i + 1) * nv];
                for (k, e) in row.iter_mut().enumerate().take(d) {
                    let st = grid.strides[k];
                    let diff = (comp[v + st] as f64 - comp[v - st] as f64) / 2.0;
                    *e = diff + if i == k { 1.0 } else { 0.0 };
                }
            }
            total += 1;
            if det(&j, d) <= 0.0 {
                folds += 1;
            }
        }
    }
    Ok(folds as f64 / total as f64)
}

/// Smoothness penalty: over each spatial axis, the squared forward
/// difference summed over channels and averaged over batch and positions,
/// then summed across axes.
pub fn field_gradient_energy<'g, T: Float>(field: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = field.shape();
    let d = check_field_shape(&s)?;
    let mut total: Option<Var<'g, T>> = None;
    for a in 0..d {
        let axis = 2 + a;
        let n = s[axis];
        if n < 2 {
            continue;
        }
        let diff = field.narrow(axis, 1, n - 1)?.sub(field.narrow(axis, 0, n - 1)?)?;
        let positions = diff.value().numel() / (s[0] * d);
        let term = diff.square().sum_all().mul_scalar(1.0 / (s[0] * positions) as f64);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| field.graph().constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Graph};
    use rand::SeedableRng;

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 1, h, w], |i| ((i * 7919) % 23) as f32 / 23.0)
    }

    #[test]
    fn zero_field_is_identity() {
        let img = image(6, 5);
        let out = warp_tensor(&img, &Tensor::zeros([1, 2, 6, 5])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_shift_moves_rows_and_clamps_border() {
        let img = image(4, 3);
        let mut f = Tensor::zeros([1, 2, 4, 3]);
        f.data_mut()[..12].iter_mut().for_each(|v| *v = 1.0);
        let out = warp_tensor(&img, &f).unwrap();
        for y in 0..4 {
            for x in 0..3 {
                let src = (y + 1).min(3);
                assert_eq!(out.data()[y * 3 + x], img.data()[src * 3 + x]);
            }
        }
    }

    #[test]
    fn half_shift_matches_bilinear_formula() {
        // a single row [0, 1, 0] shifted by half a pixel along columns
        let img = Tensor::new([1, 1, 1, 3], vec![0.0f32, 1.0, 0.0]).unwrap();
        let mut f = Tensor::zeros([1, 2, 1, 3]);
        f.data_mut()[3..].iter_mut().for_each(|v| *v = 0.5);
        let out = warp_tensor(&img, &f).unwrap();
        let expect = [0.5 * 0.0 + 0.5 * 1.0, 0.5 * 1.0 + 0.5 * 0.0, 0.0];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn rank_mismatch_rejected() {
        let g = Graph::<f32>::new();
        let img = g.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(warp(img, g.constant(Tensor::zeros([1, 3, 4, 4]))).is_err());
        assert!(warp(img, g.constant(Tensor::zeros([1, 2, 4, 5]))).is_err());
    }

    #[test]
    fn trilinear_zero_field_and_shift() {
        let img = Tensor::<f32>::from_fn([1, 2, 3, 4, 5], |i| (i % 11) as f32);
        assert_eq!(warp_tensor(&img, &Tensor::zeros([1, 3, 3, 4, 5])).unwrap(), img);
        let mut f = Tensor::zeros([1, 3, 3, 4, 5]);
        // shift along the last axis by one voxel
        f.data_mut()[2 * 60..].iter_mut().for_each(|v| *v = 1.0);
        let out = warp_tensor(&img, &f).unwrap();
        assert_eq!(out.data()[0], img.data()[1]);
        assert_eq!(out.data()[4], img.data()[4]);
    }

    // displacements whose fractional parts stay clear of the piecewise kinks
    fn smooth_field(shape: &[usize], r: &mut impl rand::Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = 0.1 + 0.8 * r.random::<f64>();
            if r.random::<bool>() { m } else { -m }
        })
    }

    #[test]
    fn warp_grads_2d_and_3d() {
        for seed in 0..5 {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f64>::randn([2, 2, 5, 6], &mut r);
            let fld = smooth_field(&[2, 2, 5, 6], &mut r);
            let probe = Tensor::<f64>::randn([2, 2, 5, 6], &mut r);
            let (f1, p1) = (fld.clone(), probe.clone());
            let ei = grad_check(
                |g, i| warp(i, g.constant(f1.clone())).unwrap().mul(g.constant(p1.clone())).unwrap().sum_all(),
                &img,
                1e-3,
            )
            .unwrap();
            let eu = grad_check(
                |g, u| warp(g.constant(img.clone()), u).unwrap().mul(g.constant(probe.clone())).unwrap().sum_all(),
                &fld,
                1e-3,
            )
            .unwrap();
            assert!(ei < 1e-4 && eu < 1e-4, "2d {ei} {eu}");

            let img3 = Tensor::<f64>::randn([1, 1, 3, 4, 4], &mut r);
            let fld3 = smooth_field(&[1, 3, 3, 4, 4], &mut r);
            let eu3 = grad_check(|g, u| warp(g.constant(img3.clone()), u).unwrap().square().sum_all(), &fld3, 1e-3)
                .unwrap();
            assert!(eu3 < 1e-4, "3d {eu3}");
        }
    }

    #[test]
    fn frozen_check_holds_clamps_and_cells() {
        // coordinates a hair outside the grid and a hair below a cell
        // boundary; probing by h crosses both kinks
        let img = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| ((i * 5) % 7) as f64 - 3.0);
        let fld = Tensor::<f64>::from_fn([1, 2, 4, 4], |i| match i % 3 {
            0 => -0.0004 - (i / 4 % 4) as f64,
            1 => 0.9996,
            _ => 0.3,
        });
        let err = crate::tensor::grad_check_piecewise(
            |g, u| warp(g.constant(img.clone()), u).unwrap().square().sum_all(),
            &fld,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn linear_field(a: [[f64; 2]; 2], n: usize) -> Tensor<f32> {
        // u(x) = (A - I) x, centred on the grid
        let c = (n as f64 - 1.0) / 2.0;
        Tensor::from_fn([1, 2, n, n], |i| {
            let comp = i / (n * n);
            let (y, x) = (((i / n) % n) as f64 - c, (i % n) as f64 - c);
            let p = [y, x];
            let ax = a[comp][0] * p[0] + a[comp][1] * p[1];
            (ax - p[comp]) as f32
        })
    }

    #[test]
    fn fold_fraction_of_linear_maps() {
        assert_eq!(jacobian_fold_fraction(&Tensor::zeros([1, 2, 8, 8])).unwrap(), 0.0);
        assert_eq!(jacobian_fold_fraction(&Tensor::full([1, 2, 8, 8], 1.5)).unwrap(), 0.0);
        assert_eq!(jacobian_fold_fraction(&linear_field([[1.2, 0.3], [-0.4, 0.9]], 9)).unwrap(), 0.0);
        assert_eq!(jacobian_fold_fraction(&linear_field([[-1.0, 0.2], [0.1, 1.1]], 9)).unwrap(), 1.0);
        // u_x = -2x reflects the column axis
        assert_eq!(jacobian_fold_fraction(&linear_field([[1.0, 0.0], [0.0, -1.0]], 7)).unwrap(), 1.0);
        assert!(jacobian_fold_fraction(&Tensor::zeros([1, 2, 2, 8])).is_err());
    }

    #[test]
    fn smoothness_energy_closed_forms() {
        let g = Graph::<f64>::new();
        let c = field_gradient_energy(g.constant(Tensor::full([2, 2, 5, 5], 3.0))).unwrap();
        assert_eq!(c.value().data()[0], 0.0);
        let s = 0.7;
        let ramp = Tensor::from_fn([1, 2, 6, 5], |i| if i >= 30 { s * (i % 5) as f64 } else { 0.0 });
        let e = field_gradient_energy(g.constant(ramp)).unwrap().value().data()[0];
        assert!((e - s * s).abs() < 1e-12, "{e}");

        for seed in 0..5 {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u = Tensor::<f64>::randn([2, 2, 4, 5], &mut r);
            let err = grad_check(|_, u| field_gradient_energy(u).unwrap(), &u, 1e-3).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn nearest_warp_keeps_masks_binary() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mask = Tensor::<f32>::from_fn([1, 1, 8, 8], |i| ((i / 3) % 2) as f32);
        let fld = Tensor::<f32>::randn([1, 2, 8, 8], &mut r).scale(1.5);
        let out = warp_nearest(&mask, &fld).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(warp_nearest(&mask, &Tensor::zeros([1, 2, 8, 8])).unwrap(), mask);
    }
}
