use rand::Rng;
use rand_distr::StandardNormal;

use super::PairSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{jacobian_fold_fraction, warp_nearest, warp_tensor};

/// Generator settings for synthetic pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    /// Standard deviation (pixels) of the blur that smooths the random field.
    pub blur: f64,
    /// Length (pixels) of the longest displacement vector.
    pub max_mag: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 32,
            blur: 4.0,
            max_mag: 3.0,
        }
    }
}

/// Foreground threshold on the `[0, 1]` base image.
pub const MASK_THRESHOLD: f32 = 0.25;
/// Attempts before giving up on a fold-free field.
pub const MAX_DRAWS: usize = 100;
/// Fixed-point iterations used to invert the generating field.
pub const INVERSE_ITERS: usize = 5;

/// 2–4 soft ellipses of random brightness in `[0, 1]` on a zero
/// background, `[1, 1, n, n]`.
pub fn render_blobs(rng: &mut impl Rng, n: usize) -> Tensor {
    let count = rng.random_range(2..=4);
    let nf = n as f64;
    let blobs: Vec<[f64; 6]> = (0..count)
        .map(|_| {
            [
                rng.random_range(0.25 * nf..0.75 * nf),
                rng.random_range(0.25 * nf..0.75 * nf),
                rng.random_range(0.1 * nf..0.25 * nf),
                rng.random_range(0.1 * nf..0.25 * nf),
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(0.4..1.0),
            ]
        })
        .collect();
    // half-width (pixels) of the smoothstep edge; outside it the image is
    // exactly zero, so empty background carries no correlation signal
    let soft = 1.5;
    Tensor::from_fn([1, 1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        let mut v = 0.0f64;
        for &[cy, cx, ry, rx, angle, bright] in &blobs {
            let (s, c) = angle.sin_cos();
            let (dy, dx) = (y - cy, x - cx);
            let (u, w) = (c * dy + s * dx, -s * dy + c * dx);
            let r = ((u / ry).powi(2) + (w / rx).powi(2)).sqrt();
            // signed distance to the boundary, approximately in pixels
            let d = (1.0 - r) * ry.min(rx);
            let t = ((d + soft) / (2.0 * soft)).clamp(0.0, 1.0);
            v = v.max(bright * t * t * (3.0 - 2.0 * t));
        }
        v as f32
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of each `n×n` plane with edge replication.
fn blur_planes(data: &mut [f64], n: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for plane in data.chunks_mut(n * n) {
        for y in 0..n {
            for x in 0..n {
                tmp[y * n + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * plane[y * n + clamp(x as isize + j as isize - r)])
                    .sum();
            }
        }
        for y in 0..n {
            for x in 0..n {
                plane[y * n + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[clamp(y as isize + j as isize - r) * n + x])
                    .sum();
            }
        }
    }
}

/// Smooth random displacement `[1, 2, n, n]` whose largest vector has
/// length `peak`.
pub fn random_field(rng: &mut impl Rng, n: usize, blur: f64, peak: f64) -> Tensor {
    let mut raw: Vec<f64> = (0..2 * n * n).map(|_| rng.sample(StandardNormal)).collect();
    if blur > 0.0 {
        blur_planes(&mut raw, n, blur);
    }
    let longest = (0..n * n)
        .map(|i| raw[i].hypot(raw[n * n + i]))
        .fold(0.0f64, f64::max);
    let scale = if longest > 0.0 { peak / longest } else { 0.0 };
    Tensor::from_fn([1, 2, n, n], |i| (raw[i] * scale) as f32)
}

/// Field `v` with `v(x) ≈ −u(x + v(x))`, so warping by `v` undoes a warp by `u`.
pub fn invert_field(u: &Tensor, iters: usize) -> Result<Tensor> {
    let mut v = u.scale(-1.0);
    for _ in 0..iters {
        v = warp_tensor(u, &v)?.scale(-1.0);
    }
    Ok(v)
}

/// One synthetic pair. The fixed image is a blob rendering, the moving
/// image is that rendering warped by a smooth fold-free field, and the
/// stored ground truth is the approximate inverse field, which maps the
/// moving image back onto the fixed one.
pub fn synth_pair(rng: &mut impl Rng, p: &SynthParams) -> Result<PairSample> {
    if p.size < 16 || !(p.blur >= 0.0) || !(p.max_mag >= 0.0) {
        return Err(Error::invalid(
            "synth_pair",
            format!("need size >= 16 and non-negative blur and magnitude, got {p:?}"),
        ));
    }
    let n = p.size;
    let base = render_blobs(rng, n);
    let mut accepted = None;
    for _ in 0..MAX_DRAWS {
        let u = random_field(rng, n, p.blur, p.max_mag);
        if jacobian_fold_fraction(&u)? > 0.0 {
            continue;
        }
        let v = invert_field(&u, INVERSE_ITERS)?;
        if jacobian_fold_fraction(&v)? > 0.0 {
            continue;
        }
        accepted = Some((u, v));
        break;
    }
    let (u, v) = accepted.ok_or_else(|| {
        Error::invalid(
            "synth_pair",
            format!(
                "no fold-free field in {MAX_DRAWS} draws; max_mag {} is too large for blur {}",
                p.max_mag, p.blur
            ),
        )
    })?;
    let moving01 = warp_tensor(&base, &u)?;
    let mask_f = base.map(|x| if x > MASK_THRESHOLD { 1.0 } else { 0.0 });
    let mask_m = warp_nearest(&mask_f, &u)?;
    let to_signed = |t: &Tensor| t.map(|x| (2.0 * x - 1.0).clamp(-1.0, 1.0));
    Ok(PairSample {
        moving: to_signed(&moving01),
        fixed: to_signed(&base),
        gt_field: Some(v),
        masks: Some((mask_m, mask_f)),
    })
}
