use rand::Rng;

use super::layers::{Attention, Conv, GroupNorm, ResBlock, TimeEmbedding};
use super::params::{Bound, Init};
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};

/// Conditional noise predictor: a time-conditioned U-Net over the channel
/// stack `(moving, fixed, x_t)` with self-attention at the coarsest level.
#[derive(Debug, Clone)]
pub struct ScoreNet {
    channels: usize,
    time: TimeEmbedding,
    input: Conv,
    encoder: Vec<ResBlock>,
    down: Vec<Conv>,
    attention: Option<Attention>,
    middle: ResBlock,
    decoder: Vec<ResBlock>,
    up: Vec<Conv>,
    out_norm: GroupNorm,
    output: Conv,
}

impl ScoreNet {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, arch: &ArchConfig) -> Self {
        let w = &arch.score_widths;
        let (c, td, gr) = (arch.channels, arch.time_dim, arch.groups);
        let time = TimeEmbedding::new(&mut init.scope("time"), td);
        let input = Conv::new(&mut init.scope("input"), 3 * c, w[0], 3, 1);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut prev = w[0];
        for (i, &wi) in w.iter().enumerate() {
            encoder.push(ResBlock::new(&mut init.scope(&format!("enc{i}")), prev, wi, td, gr));
            if i + 1 < w.len() {
                down.push(Conv::new(&mut init.scope(&format!("down{i}")), wi, wi, 3, 2));
            }
            prev = wi;
        }
        let deepest = *w.last().expect("non-empty widths");
        let attention = arch
            .attention
            .then(|| Attention::new(&mut init.scope("attn"), deepest, gr));
        let middle = ResBlock::new(&mut init.scope("mid"), deepest, deepest, td, gr);
        let mut decoder = Vec::new();
        let mut up = Vec::new();
        for (i, &wi) in w.iter().enumerate().rev() {
            decoder.push(ResBlock::new(&mut init.scope(&format!("dec{i}")), prev + wi, wi, td, gr));
            if i > 0 {
                up.push(Conv::new(&mut init.scope(&format!("up{i}")), wi, wi, 3, 1));
            }
            prev = wi;
        }
        ScoreNet {
            channels: c,
            time,
            input,
            encoder,
            down,
            attention,
            middle,
            decoder,
            up,
            out_norm: GroupNorm::new(&mut init.scope("out_norm"), w[0], gr),
            output: Conv::new(&mut init.scope("output"), w[0], c, 3, 1),
        }
    }

    /// Spatial extents must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.down.len()
    }

    /// Predicted noise for `x_t`, shape of `x_t`. `ts` holds one step per
    /// batch element.
    pub fn forward<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        moving: Var<'g, T>,
        fixed: Var<'g, T>,
        x_t: Var<'g, T>,
        ts: &[usize],
    ) -> Result<Var<'g, T>> {
        let s = x_t.shape();
        for other in [moving.shape(), fixed.shape()] {
            if other != s {
                return Err(Error::shape("score network", &other, &s));
            }
        }
        let mult = self.size_multiple();
        if s.len() != 4 || s[1] != self.channels || s[2] % mult != 0 || s[3] % mult != 0 || ts.len() != s[0] {
            return Err(Error::invalid(
                "score network",
                format!(
                    "expected [B, {}, H, W] with H, W divisible by {mult} and {} steps, got {s:?} and {} steps",
                    self.channels,
                    s[0],
                    ts.len()
                ),
            ));
        }
        let graph: &'g Graph<T> = x_t.graph();
        let temb = self.time.forward(p, graph, ts)?;
        let mut h = self.input.forward(p, Var::concat(&[moving, fixed, x_t], 1)?)?;
        let mut skips = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(p, h, temb)?;
            if i + 1 == self.encoder.len() {
                if let Some(a) = &self.attention {
                    h = a.forward(p, h)?;
                }
            }
            skips.push(h);
            if let Some(d) = self.down.get(i) {
                h = d.forward(p, h)?;
            }
        }
        h = self.middle.forward(p, h, temb)?;
        for (j, block) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(p, Var::concat(&[h, skip], 1)?, temb)?;
            if let Some(u) = self.up.get(j) {
                h = u.forward(p, h.nearest_upsample2()?)?;
            }
        }
        self.output.forward(p, self.out_norm.forward(p, h)?.swish())
    }
}
