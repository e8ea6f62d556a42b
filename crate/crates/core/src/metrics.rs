//! Image similarity, overlap and field-regularity metrics, and the CSV
//! report that collects them.
//!
//! Intensity metrics expect images already mapped to `[0, 1]`.

use std::io::Write;

use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{warp_nearest, warp_tensor};

pub use crate::warp::jacobian_fold_fraction;

/// SSIM window side.
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `‖a − b‖² / ‖b‖²`.
pub fn nmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("nmse", a, b)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        return Err(Error::invalid("nmse", "reference image is all zero"));
    }
    Ok(num / den)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Mean structural similarity over every 8×8 window (stride 1) of every
/// 2D plane in `[.., H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() < 2 || s[s.len() - 2] < SSIM_WINDOW || s[s.len() - 1] < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {s:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0f64, 0usize);
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[y * w + x] as f64, pb[y * w + x] as f64);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("dice", a, b)?;
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(a) || !binary(b) {
        return Err(Error::invalid("dice", "masks must contain only 0 and 1"));
    }
    let (mut inter, mut size) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x == 1.0 && y == 1.0) as usize;
        size += (x == 1.0) as usize + (y == 1.0) as usize;
    }
    Ok(if size == 0 { 1.0 } else { 2.0 * inter as f64 / size as f64 })
}

/// Metrics of one registered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub nmse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    /// `None` when the pair carries no masks.
    pub dice: Option<f64>,
    pub fold_pct: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 5] = ["nmse", "ssim", "psnr_db", "dice", "fold_pct"];

    fn values(&self) -> [Option<f64>; 5] {
        [Some(self.nmse), Some(self.ssim), Some(self.psnr_db), self.dice, Some(self.fold_pct)]
    }
}

fn to01(t: &Tensor) -> Tensor {
    t.map(|v| (v + 1.0) / 2.0)
}

/// Warps the moving image (bilinear) and its mask (nearest) with `field`
/// (`[1, 2, H, W]`) and compares against the fixed image and mask.
pub fn evaluate_pair(sample: &PairSample, field: &Tensor) -> Result<MetricReport> {
    let warped = warp_tensor(&sample.moving, field)?;
    evaluate_warped(sample, &warped, field)
}

/// Like [`evaluate_pair`] with the warped image already computed.
pub fn evaluate_warped(sample: &PairSample, warped: &Tensor, field: &Tensor) -> Result<MetricReport> {
    let (w01, f01) = (to01(warped), to01(&sample.fixed));
    let dice = match &sample.masks {
        Some((mm, mf)) => {
            let moved = warp_nearest(mm, field)?;
            Some(dice(&moved, mf)?)
        }
        None => None,
    };
    Ok(MetricReport {
        nmse: nmse(&w01, &f01)?,
        ssim: ssim(&w01, &f01)?,
        psnr_db: psnr(&w01, &f01, 1.0)?,
        dice,
        fold_pct: 100.0 * jacobian_fold_fraction(field)?,
    })
}

/// Mean and population standard deviation (two-pass).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Per-pair metric rows with one or more column groups (the learned model
/// first, then e.g. a baseline). Group `i > 0` columns carry its prefix.
#[derive(Debug, Clone, Default)]
pub struct Report {
    prefixes: Vec<String>,
    rows: Vec<(String, Vec<MetricReport>)>,
}

/// Pair label of the summary row.
pub const SUMMARY_LABEL: &str = "mean (std)";

impl Report {
    /// `extra` lists prefixes of the additional groups, e.g. `["baseline"]`.
    pub fn new(extra: &[&str]) -> Self {
        let mut prefixes = vec![String::new()];
        prefixes.extend(extra.iter().map(|p| format!("{p}_")));
        Report { prefixes, rows: Vec::new() }
    }

    pub fn push(&mut self, pair: impl Into<String>, groups: Vec<MetricReport>) -> Result<()> {
        if groups.len() != self.prefixes.len() {
            return Err(Error::invalid(
                "report",
                format!("row has {} metric groups, header has {}", groups.len(), self.prefixes.len()),
            ));
        }
        self.rows.push((pair.into(), groups));
        Ok(())
    }

    pub fn rows(&self) -> &[(String, Vec<MetricReport>)] {
        &self.rows
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["pair".to_string()];
        for p in &self.prefixes {
            h.extend(MetricReport::COLUMNS.iter().map(|c| format!("{p}{c}")));
        }
        h
    }

    /// Per column (excluding `pair`): values present in the rows.
    pub fn column(&self, group: usize, col: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|(_, g)| g[group].values()[col]).collect()
    }

    /// Mean and std of every column, in header order.
    pub fn summary(&self) -> Vec<(f64, f64)> {
        (0..self.prefixes.len())
            .flat_map(|g| (0..MetricReport::COLUMNS.len()).map(move |c| (g, c)))
            .map(|(g, c)| mean_std(&self.column(g, c)))
            .collect()
    }

    /// Writes the header, one row per pair and, if there are rows, the
    /// summary row `mean (std)`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Format {
            kind: "CSV",
            msg: e.to_string(),
        };
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header()).map_err(csv_err)?;
        for (pair, groups) in &self.rows {
            let mut rec = vec![pair.clone()];
            for g in groups {
                rec.extend(g.values().iter().map(|v| v.map(format_value).unwrap_or_default()));
            }
            out.write_record(&rec).map_err(csv_err)?;
        }
        if !self.rows.is_empty() {
            let mut rec = vec![SUMMARY_LABEL.to_string()];
            rec.extend(
                self.summary()
                    .into_iter()
                    .map(|(m, s)| format!("{} ({})", format_value(m), format_value(s))),
            );
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Format {
            kind: "CSV",
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
