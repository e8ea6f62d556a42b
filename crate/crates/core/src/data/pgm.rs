//! 8-bit binary PGM previews. Intensities in `[-1, 1]` map linearly to
//! `[0, 255]`; values outside are clamped.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "PGM",
        msg: msg.into(),
    }
}

/// Height and width of a single 2D image given as `[H, W]`, `[1, H, W]` or
/// `[1, 1, H, W]`.
fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    let lead = &s[..s.len().saturating_sub(2)];
    if s.len() < 2 || s.len() > 4 || lead.iter().any(|&d| d != 1) {
        return Err(Error::invalid("pgm", format!("expected a single 2D image, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(t)?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_byte(v)).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| format_err(e.to_string()))?;
    Ok(out)
}

/// Decodes an 8-bit greyscale PGM into `[1, 1, H, W]` in `[-1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm).map_err(|e| format_err(e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(format_err(format!("expected 8-bit greyscale, got {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(from_byte).collect();
    Tensor::new([1, 1, h as usize, w as usize], data)
}

pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_pgm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
