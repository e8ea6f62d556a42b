//! Joint training of both networks, checkpoints, and the network-free
//! optimization baseline.

mod adam;
mod checkpoint;
mod classical;
mod config;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classical::{classical_register, ClassicalResult, DIVERGENCE_PATIENCE};
pub use config::TrainingConfig;

use crate::data::{augment, Dataset, PairSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::nets::Model;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor};

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub diffusion: f64,
    pub registration: f64,
    pub total: f64,
}

fn stack(parts: Vec<&Tensor>) -> Result<Tensor> {
    Tensor::concat(&parts, 0)
}

/// One optimizer step on `batch`. Each pair draws its own step `t`,
/// uniform over the schedule, then its own noise.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[PairSample],
    sched: &NoiseSchedule,
    w: &LossWeights,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let mut ts = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let mut noised = Vec::with_capacity(batch.len());
    for s in batch {
        let t = rng.random_range(1..=sched.len());
        let eps = Tensor::randn(s.fixed.shape(), rng);
        noised.push(sched.forward_sample(&s.fixed, t, &eps)?);
        noise.push(eps);
        ts.push(t);
    }
    let moving = stack(batch.iter().map(|s| &s.moving).collect())?;
    let fixed = stack(batch.iter().map(|s| &s.fixed).collect())?;
    let x_t = stack(noised.iter().collect())?;
    let eps = stack(noise.iter().collect())?;

    let g = Graph::new();
    let p = model.params.bind(&g, true);
    let terms = total_loss(
        model,
        &p,
        g.constant(moving),
        g.constant(fixed),
        g.constant(x_t),
        &ts,
        g.constant(eps),
        w,
    )?;
    let value = |v: crate::tensor::Var<'_, f32>| v.value().data()[0] as f64;
    let losses = StepLosses {
        diffusion: value(terms.diffusion),
        registration: value(terms.registration),
        total: value(terms.total),
    };
    for (name, v) in [
        ("diffusion loss", losses.diffusion),
        ("registration loss", losses.registration),
        ("total loss", losses.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    terms.total.backward()?;
    let grads: Vec<Tensor> = p
        .vars()
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        let name = model.params.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    adam.step(&mut model.params, &grads)?;
    Ok(losses)
}

/// Random stream for one epoch: depends only on the seed and the epoch,
/// so a resumed run draws exactly what an uninterrupted one would.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over `pairs` in shuffled, augmented batches. `on_step`
/// receives the global step number (from 1) and the losses.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    pairs: &[PairSample],
    cfg: &TrainingConfig,
    sched: &NoiseSchedule,
    epoch: usize,
    mut on_step: impl FnMut(u64, StepLosses) -> Result<()>,
) -> Result<()> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<PairSample> = chunk.iter().map(|&i| augment(&pairs[i], &mut rng, cfg.augment)).collect();
        let l = train_step(model, adam, &batch, sched, &cfg.weights, &mut rng)?;
        on_step(adam.step_count(), l)?;
    }
    Ok(())
}

pub const LOG_HEADER: &str = "step,epoch,l_diffusion,l_regist,total";

/// Paths written by [`train`] under the configured output directory.
pub fn final_checkpoint_path(cfg: &TrainingConfig) -> PathBuf {
    cfg.output.join("checkpoint.dmck")
}

pub fn periodic_checkpoint_path(cfg: &TrainingConfig, epoch: usize) -> PathBuf {
    cfg.output.join(format!("checkpoint_epoch_{epoch:04}.dmck"))
}

pub fn log_path(cfg: &TrainingConfig) -> PathBuf {
    cfg.output.join("log.csv")
}

fn log_line(step: u64, epoch: usize, l: &StepLosses) -> String {
    format!("{step},{epoch},{:?},{:?},{:?}\n", l.diffusion, l.registration, l.total)
}

/// Trains per `cfg` on the dataset at `cfg.data`, writing periodic and
/// final checkpoints plus the loss log to `cfg.output`. With `resume`
/// set, continues from that checkpoint's model, optimizer and epoch, and
/// appends to the log. Returns the final checkpoint path.
pub fn train(cfg: &TrainingConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let pairs = Dataset::open(&cfg.data)?.load_all()?;
    train_on(cfg, &pairs)
}

/// [`train`] with the pairs already in memory.
pub fn train_on(cfg: &TrainingConfig, pairs: &[PairSample]) -> Result<PathBuf> {
    cfg.validate()?;
    if let Some(s) = pairs.first() {
        let (h, w) = s.spatial();
        let k = cfg.arch.size_multiple();
        if h % k != 0 || w % k != 0 {
            return Err(Error::invalid("train", format!("image size {h}x{w} is not a multiple of {k}")));
        }
    }
    let sched = cfg.schedule()?;
    let (mut model, mut adam, start) = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut model = Model::new(cfg.arch.clone(), cfg.seed)?;
            ck.load_into(&mut model)?;
            let mut adam = ck.adam(&model)?;
            adam.lr = cfg.learning_rate;
            (model, adam, ck.epoch)
        }
        None => {
            let model = Model::new(cfg.arch.clone(), cfg.seed)?;
            let adam = Adam::new(&model.params, cfg.learning_rate);
            (model, adam, 0)
        }
    };
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let log = log_path(cfg);
    let append = cfg.resume.is_some() && log.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    if !append {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&log, e))?;
    }
    for epoch in start..cfg.epochs {
        let mut lines = String::new();
        train_epoch(&mut model, &mut adam, pairs, cfg, &sched, epoch, |step, l| {
            lines.push_str(&log_line(step, epoch + 1, &l));
            Ok(())
        })?;
        file.write_all(lines.as_bytes()).map_err(|e| Error::io(&log, e))?;
        let done = epoch + 1;
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.epochs {
            save_checkpoint(periodic_checkpoint_path(cfg, done), cfg, &model, Some(&adam), done)?;
        }
    }
    file.flush().map_err(|e| Error::io(&log, e))?;
    let out = final_checkpoint_path(cfg);
    save_checkpoint(&out, cfg, &model, Some(&adam), cfg.epochs.max(start))?;
    Ok(out)
}

/// Reads a log written by [`train`]: `(step, epoch, losses)` per line.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<(u64, usize, StepLosses)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize| Error::Format {
        kind: "log",
        msg: format!("line {n} is malformed"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n + 1));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n + 1));
        out.push((
            f[0].parse().map_err(|_| bad(n + 1))?,
            f[1].parse().map_err(|_| bad(n + 1))?,
            StepLosses {
                diffusion: num(2)?,
                registration: num(3)?,
                total: num(4)?,
            },
        ));
    }
    Ok(out)
}
