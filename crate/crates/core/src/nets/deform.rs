use rand::Rng;

use super::layers::{Conv, UpConv};
use super::params::{Bound, Init};
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// Convolution followed by leaky ReLU.
#[derive(Debug, Clone)]
struct Unit(Conv);

impl Unit {
    fn new<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize, stride: usize) -> Self {
        Unit(Conv::new(init, cin, cout, 3, stride))
    }

    fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.0.forward(p, x)?.leaky_relu())
    }
}

/// U-shaped network mapping `(moving, latent)` to a displacement field with
/// one channel per spatial axis.
#[derive(Debug, Clone)]
pub struct DeformNet {
    channels: usize,
    encoder: Vec<Unit>,
    bottom: Unit,
    up: Vec<UpConv>,
    decoder: Vec<Unit>,
    head: Vec<Unit>,
    output: Conv,
}

/// Width of the full-resolution head.
const HEAD_WIDTH: usize = 16;

impl DeformNet {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, arch: &ArchConfig) -> Self {
        let w = &arch.deform_widths;
        let input = 2 * arch.channels;
        let mut encoder = Vec::new();
        let mut prev = input;
        for (i, &wi) in w.iter().enumerate() {
            encoder.push(Unit::new(&mut init.scope(&format!("enc{i}")), prev, wi, 2));
            prev = wi;
        }
        let bottom = Unit::new(&mut init.scope("bottom"), prev, prev, 1);
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        // levels below the top fuse with the matching encoder output
        for i in (0..w.len()).rev() {
            up.push(UpConv::new(&mut init.scope(&format!("up{i}")), prev, prev));
            let skip = if i == 0 { input } else { w[i - 1] };
            let out = if i == 0 { HEAD_WIDTH } else { w[i - 1] };
            decoder.push(Unit::new(&mut init.scope(&format!("dec{i}")), prev + skip, out, 1));
            prev = out;
        }
        let head = vec![Unit::new(&mut init.scope("head"), prev, HEAD_WIDTH, 1)];
        DeformNet {
            channels: arch.channels,
            encoder,
            bottom,
            up,
            decoder,
            head,
            output: Conv::zeroed(&mut init.scope("output"), HEAD_WIDTH, 2, 3),
        }
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.encoder.len()
    }

    /// Displacement field `[B, 2, H, W]`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, moving: Var<'g, T>, latent: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = moving.shape();
        if latent.shape() != s {
            return Err(Error::shape("deformation network", &s, &latent.shape()));
        }
        let mult = self.size_multiple();
        if s.len() != 4 || s[1] != self.channels || s[2] % mult != 0 || s[3] % mult != 0 {
            return Err(Error::invalid(
                "deformation network",
                format!("expected [B, {}, H, W] with H, W divisible by {mult}, got {s:?}", self.channels),
            ));
        }
        let x = Var::concat(&[moving, latent], 1)?;
        let mut feats = vec![x];
        let mut h = x;
        for unit in &self.encoder {
            h = unit.forward(p, h)?;
            feats.push(h);
        }
        feats.pop();
        h = self.bottom.forward(p, h)?;
        for (up, unit) in self.up.iter().zip(&self.decoder) {
            let skip = feats.pop().expect("one feature map per level");
            h = unit.forward(p, Var::concat(&[up.forward(p, h)?, skip], 1)?)?;
        }
        for unit in &self.head {
            h = unit.forward(p, h)?;
        }
        self.output.forward(p, h)
    }
}
