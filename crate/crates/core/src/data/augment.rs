use rand::Rng;

use super::PairSample;
use crate::tensor::Tensor;

/// Which random flips and rotations `augment` may apply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns; skipped on non-square images.
    pub rot90: bool,
}

impl AugmentFlags {
    pub fn any(&self) -> bool {
        self.hflip || self.vflip || self.rot90
    }
}

/// Rigid index map on an `h×w` grid, with the matching linear map on
/// displacement vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Mirror columns.
    HFlip,
    /// Mirror rows.
    VFlip,
    /// One counter-clockwise quarter turn: `out[i][j] = in[j][n-1-i]`.
    Rot90,
}

impl Transform {
    /// Source pixel read by output pixel `(i, j)`.
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::HFlip => (i, w - 1 - j),
            Transform::VFlip => (h - 1 - i, j),
            Transform::Rot90 => (j, h - 1 - i),
        }
    }

    /// New displacement from the one read at the source pixel. If
    /// `m(x + v(x)) ≈ f(x)` then the transformed images satisfy the same
    /// relation with the transformed field.
    fn vector(self, v0: f32, v1: f32) -> (f32, f32) {
        match self {
            Transform::HFlip => (v0, -v1),
            Transform::VFlip => (-v0, v1),
            Transform::Rot90 => (-v1, v0),
        }
    }

    fn apply_planes(self, t: &Tensor) -> Tensor {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let plane = h * w;
        let mut out = vec![0.0f32; t.numel()];
        for (src, dst) in t.data().chunks(plane).zip(out.chunks_mut(plane)) {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = self.source(i, j, h, w);
                    dst[i * w + j] = src[si * w + sj];
                }
            }
        }
        Tensor::new(s.to_vec(), out).expect("same element count")
    }

    /// Moves pixels of an image-like tensor `[.., H, W]`.
    pub fn image(self, t: &Tensor) -> Tensor {
        self.apply_planes(t)
    }

    /// Moves and re-orients a 2D field `[B, 2, H, W]`.
    pub fn field(self, t: &Tensor) -> Tensor {
        let moved = self.apply_planes(t);
        let plane = t.shape()[2] * t.shape()[3];
        let mut data = moved.into_data();
        for item in data.chunks_mut(2 * plane) {
            let (a, b) = item.split_at_mut(plane);
            for (v0, v1) in a.iter_mut().zip(b.iter_mut()) {
                (*v0, *v1) = self.vector(*v0, *v1);
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("same element count")
    }

    /// Applies the transform jointly to every tensor of a sample.
    pub fn sample(self, s: &PairSample) -> PairSample {
        PairSample {
            moving: self.image(&s.moving),
            fixed: self.image(&s.fixed),
            gt_field: s.gt_field.as_ref().map(|f| self.field(f)),
            masks: s.masks.as_ref().map(|(a, b)| (self.image(a), self.image(b))),
        }
    }
}

/// Random flips and quarter turns drawn from `rng`, each enabled kind with
/// probability 1/2 (turns: uniform over 0–3).
pub fn augment(sample: &PairSample, rng: &mut impl Rng, flags: AugmentFlags) -> PairSample {
    let mut out = sample.clone();
    let (h, w) = sample.spatial();
    if flags.hflip && rng.random_bool(0.5) {
        out = Transform::HFlip.sample(&out);
    }
    if flags.vflip && rng.random_bool(0.5) {
        out = Transform::VFlip.sample(&out);
    }
    if flags.rot90 && h == w {
        for _ in 0..rng.random_range(0..4) {
            out = Transform::Rot90.sample(&out);
        }
    }
    out
}
