//! Synthetic image pairs, augmentation and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.txt` and a `pairs/` folder with
//! `NNNN.m.dmt`, `NNNN.f.dmt`, `NNNN.field.dmt`, `NNNN.maskm.dmt` and
//! `NNNN.maskf.dmt` per pair. Images are stored as `[1, H, W]`, fields as
//! `[2, H, W]`.

mod augment;
pub mod pgm;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{augment, AugmentFlags, Transform};
pub use pgm::{load_image, save_image};
pub use synth::{invert_field, random_field, render_blobs, synth_pair, SynthParams, MASK_THRESHOLD};

use crate::error::{Error, Result};
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

/// A moving/fixed pair with optional ground truth. Images are
/// `[1, 1, H, W]` in `[-1, 1]`; the field is `[1, 2, H, W]` and maps the
/// moving image onto the fixed one; masks are binary and ordered
/// `(moving, fixed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub moving: Tensor,
    pub fixed: Tensor,
    pub gt_field: Option<Tensor>,
    pub masks: Option<(Tensor, Tensor)>,
}

impl PairSample {
    pub fn new(moving: Tensor, fixed: Tensor) -> Result<Self> {
        let s = PairSample {
            moving: as_image(moving)?,
            fixed: as_image(fixed)?,
            gt_field: None,
            masks: None,
        };
        s.check()?;
        Ok(s)
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.moving.shape();
        (s[2], s[3])
    }

    /// Checks shapes, intensity range and mask binarity.
    pub fn check(&self) -> Result<()> {
        let (h, w) = self.spatial();
        let img = [1, 1, h, w];
        let bad = |what: &str, msg: String| Err(Error::invalid("pair sample", format!("{what}: {msg}")));
        for (what, t) in [("moving", &self.moving), ("fixed", &self.fixed)] {
            if t.shape() != img {
                return bad(what, format!("shape {:?}, expected {img:?}", t.shape()));
            }
            if !t.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
                return bad(what, "intensity outside [-1, 1]".into());
            }
        }
        if let Some(f) = &self.gt_field {
            if f.shape() != [1, 2, h, w] || !f.all_finite() {
                return bad("field", format!("shape {:?} or non-finite values", f.shape()));
            }
        }
        if let Some((a, b)) = &self.masks {
            for (what, t) in [("moving mask", a), ("fixed mask", b)] {
                if t.shape() != img {
                    return bad(what, format!("shape {:?}, expected {img:?}", t.shape()));
                }
                if !t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                    return bad(what, "not binary".into());
                }
            }
        }
        Ok(())
    }
}

/// Accepts `[H, W]`, `[1, H, W]` or `[1, 1, H, W]`.
pub fn as_image(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    match s.as_slice() {
        [h, w] | [1, h, w] | [1, 1, h, w] => {
            let shape = [1, 1, *h, *w];
            t.reshape(shape)
        }
        _ => Err(Error::invalid("image", format!("expected a single-channel 2D image, got {s:?}"))),
    }
}

/// Accepts `[2, H, W]` or `[1, 2, H, W]`.
pub fn as_field(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    match s.as_slice() {
        [2, h, w] | [1, 2, h, w] => {
            let shape = [1, 2, *h, *w];
            t.reshape(shape)
        }
        _ => Err(Error::invalid("field", format!("expected a 2D displacement field, got {s:?}"))),
    }
}

/// Drops the leading batch axis for storage.
fn unbatched(t: &Tensor) -> Tensor {
    t.clone().reshape(t.shape()[1..].to_vec()).expect("same element count")
}

pub const FIELD_SIDECAR: &str = "displacement, voxel units";

/// Writes a field as DMT plus a one-line `.txt` sidecar naming its units.
pub fn save_field(field: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_tensor(field, path)?;
    let side = path.with_extension("txt");
    fs::write(&side, format!("{FIELD_SIDECAR}\n")).map_err(|e| Error::io(side, e))
}

fn pair_path(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join("pairs").join(format!("{id}.{kind}.dmt"))
}

fn write_pair(dir: &Path, id: &str, s: &PairSample) -> Result<()> {
    save_tensor(&unbatched(&s.moving), pair_path(dir, id, "m"))?;
    save_tensor(&unbatched(&s.fixed), pair_path(dir, id, "f"))?;
    if let Some(f) = &s.gt_field {
        save_field(&unbatched(f), pair_path(dir, id, "field"))?;
    }
    if let Some((a, b)) = &s.masks {
        save_tensor(&unbatched(a), pair_path(dir, id, "maskm"))?;
        save_tensor(&unbatched(b), pair_path(dir, id, "maskf"))?;
    }
    Ok(())
}

/// Pair `index` of the dataset seeded with `seed`: its own ChaCha8 stream,
/// so pairs can be generated in any order.
pub fn synth_indexed(seed: u64, index: u64, params: &SynthParams) -> Result<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    synth_pair(&mut rng, params)
}

/// Generates `count` pairs into `dir`, overwriting any previous files of
/// the same names.
pub fn write_dataset(dir: impl AsRef<Path>, count: usize, params: &SynthParams, seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    let pairs = dir.join("pairs");
    fs::create_dir_all(&pairs).map_err(|e| Error::io(&pairs, e))?;
    let ids: Vec<String> = (0..count).map(|i| format!("{i:04}")).collect();
    ids.par_iter().enumerate().try_for_each(|(i, id)| {
        let s = synth_indexed(seed, i as u64, params)?;
        write_pair(dir, id, &s)
    })?;
    let mut text = String::new();
    text.push_str("# synthetic registration pairs\n");
    text.push_str(&format!("# count = {count}\n# size = {}\n", params.size));
    text.push_str(&format!("# blur = {}\n# max_mag = {}\n# seed = {seed}\n", params.blur, params.max_mag));
    for id in &ids {
        text.push_str(id);
        text.push('\n');
    }
    let manifest = dir.join("manifest.txt");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest, e))
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    ids: Vec<String>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().next().unwrap_or(l).to_string())
            .collect();
        Ok(Dataset { dir, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Loads pair `i`. Ground truth and masks are optional; a pair with
    /// only one of its two mask files is an error.
    pub fn get(&self, i: usize) -> Result<PairSample> {
        let id = &self.ids[i];
        let path = |kind| pair_path(&self.dir, id, kind);
        let optional = |kind| {
            let p = path(kind);
            if p.exists() {
                load_tensor(p).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut s = PairSample::new(load_tensor(path("m"))?, load_tensor(path("f"))?)?;
        s.gt_field = optional("field")?.map(as_field).transpose()?;
        s.masks = match (optional("maskm")?, optional("maskf")?) {
            (Some(a), Some(b)) => Some((as_image(a)?, as_image(b)?)),
            (None, None) => None,
            _ => return Err(Error::invalid("dataset", format!("pair {id} has only one mask"))),
        };
        s.check()?;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<PairSample>> {
        (0..self.len()).into_par_iter().map(|i| self.get(i)).collect()
    }
}
