//! `DMCK` checkpoints: the magic bytes `DMCK`, a `u32` version, the
//! training configuration as UTF-8 text (`u32` byte length first), a `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a
//! `u32` rank, the extents and the `f32` payload. Integers and floats are
//! little-endian.
//!
//! The text block is the configuration followed by the `epoch` and
//! `adam_step` counters. Tensors are the network parameters, then the
//! optimizer moments under `adam.m.<name>` and `adam.v.<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Adam, TrainingConfig};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::tensor::io::{read_shape_and_data, read_u32};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

impl Checkpoint {
    /// Snapshot of a model and, if given, its optimizer.
    pub fn capture(config: &TrainingConfig, model: &Model, adam: Option<&Adam>, epoch: usize) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let mut adam_step = 0;
        if let Some(a) = adam {
            adam_step = a.step_count();
            let names: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
            for (n, m) in names.iter().zip(a.first_moments()) {
                tensors.push((format!("adam.m.{n}"), m.clone()));
            }
            for (n, v) in names.iter().zip(a.second_moments()) {
                tensors.push((format!("adam.v.{n}"), v.clone()));
            }
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            adam_step,
            tensors,
        }
    }

    fn header_text(&self) -> String {
        format!("{}epoch = {}\nadam_step = {}\n", self.config.to_text(), self.epoch, self.adam_step)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let io = |e: std::io::Error| bad(format!("write failed: {e}"));
        let text = self.header_text();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("tensor name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let trunc = |what: &str| {
            let what = what.to_string();
            move |_| malformed(format!("truncated {what}"))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(malformed(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = read_u32(&mut r).map_err(trunc("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(malformed(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r).map_err(trunc("header"))? as usize;
        if len > 1 << 20 {
            return Err(malformed("implausible header length"));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(trunc("header"))?;
        let text = String::from_utf8(text).map_err(|_| malformed("header is not UTF-8"))?;
        let (mut epoch, mut adam_step) = (None, None);
        let mut config_text = String::new();
        for line in text.lines() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("epoch", v)) => epoch = v.parse().ok(),
                Some(("adam_step", v)) => adam_step = v.parse().ok(),
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let config = TrainingConfig::parse(&config_text).map_err(|e| malformed(format!("stored config: {e}")))?;
        let count = read_u32(&mut r).map_err(trunc("tensor count"))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl).map_err(trunc("tensor name"))?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name).map_err(trunc("tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| malformed("tensor name is not UTF-8"))?;
            let t = read_shape_and_data(&mut r, 8).map_err(|e| malformed(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| malformed(e.to_string()))? != 0 {
            return Err(malformed("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            epoch: epoch.ok_or_else(|| malformed("missing epoch counter"))?,
            adam_step: adam_step.ok_or_else(|| malformed("missing optimizer step counter"))?,
            tensors,
        })
    }

    fn split(&self) -> (Vec<(String, Tensor)>, Vec<Tensor>, Vec<Tensor>) {
        let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for (n, t) in &self.tensors {
            if n.starts_with("adam.m.") {
                m.push(t.clone());
            } else if n.starts_with("adam.v.") {
                v.push(t.clone());
            } else {
                params.push((n.clone(), t.clone()));
            }
        }
        (params, m, v)
    }

    /// Copies the stored parameters into `model`, which must have the
    /// stored architecture.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if model.arch != self.config.arch {
            return Err(bad(format!(
                "architecture mismatch: checkpoint has {:?}, model has {:?}",
                self.config.arch, model.arch
            )));
        }
        model.params.assign_from(&self.split().0)
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.arch.clone(), self.config.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Restores the optimizer; a checkpoint without moments gives a fresh one.
    pub fn adam(&self, model: &Model) -> Result<Adam> {
        let (_, m, v) = self.split();
        if m.is_empty() && v.is_empty() {
            return Ok(Adam::new(&model.params, self.config.learning_rate));
        }
        Adam::with_state(&model.params, self.config.learning_rate, self.adam_step, m, v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(BufReader::new(file))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainingConfig,
    model: &Model,
    adam: Option<&Adam>,
    epoch: usize,
) -> Result<()> {
    Checkpoint::capture(config, model, adam, epoch).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
