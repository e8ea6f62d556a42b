//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys
//! and bad values are errors that carry their line number.

use std::collections::HashMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::AugmentFlags;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::ArchConfig;
use crate::schedule::{make_schedule, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Epochs between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub data: PathBuf,
    /// Directory receiving checkpoints and the loss log.
    pub output: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    pub arch: ArchConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-4,
            weights: LossWeights::default(),
            t_train: 2000,
            beta_start: 1e-6,
            beta_end: 1e-2,
            seed: 0,
            augment: AugmentFlags {
                hflip: true,
                vflip: true,
                rot90: true,
            },
            checkpoint_interval: 10,
            data: PathBuf::from("data"),
            output: PathBuf::from("run"),
            resume: None,
            arch: ArchConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "lambda",
    "lambda_phi",
    "ncc_window",
    "t_train",
    "beta_start",
    "beta_end",
    "seed",
    "hflip",
    "vflip",
    "rot90",
    "checkpoint_interval",
    "data",
    "output",
    "resume",
    "channels",
    "score_widths",
    "deform_widths",
    "time_dim",
    "attention",
    "groups",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e| Error::Config {
        line,
        msg: format!("invalid value `{raw}` for `{key}`: {e}"),
    })
}

fn list(line: usize, key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',').map(|p| value(line, key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainingConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            }
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(Error::Config {
                    line,
                    msg: format!("`{key}` already set on line {prev}"),
                });
            }
            cfg.set(line, key, val)?;
        }
        cfg.check(&seen)?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = value(line, key, v)?,
            "batch_size" => self.batch_size = value(line, key, v)?,
            "learning_rate" => self.learning_rate = value(line, key, v)?,
            "lambda" => self.weights.lambda = value(line, key, v)?,
            "lambda_phi" => self.weights.lambda_phi = value(line, key, v)?,
            "ncc_window" => self.weights.ncc_window = value(line, key, v)?,
            "t_train" => self.t_train = value(line, key, v)?,
            "beta_start" => self.beta_start = value(line, key, v)?,
            "beta_end" => self.beta_end = value(line, key, v)?,
            "seed" => self.seed = value(line, key, v)?,
            "hflip" => self.augment.hflip = value(line, key, v)?,
            "vflip" => self.augment.vflip = value(line, key, v)?,
            "rot90" => self.augment.rot90 = value(line, key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = value(line, key, v)?,
            "data" => self.data = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            "resume" => self.resume = (!v.is_empty()).then(|| PathBuf::from(v)),
            "channels" => self.arch.channels = value(line, key, v)?,
            "score_widths" => self.arch.score_widths = list(line, key, v)?,
            "deform_widths" => self.arch.deform_widths = list(line, key, v)?,
            "time_dim" => self.arch.time_dim = value(line, key, v)?,
            "attention" => self.arch.attention = value(line, key, v)?,
            "groups" => self.arch.groups = value(line, key, v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Cross-field validation; errors point at the line of the first key
    /// involved, or line 0 when it was left at its default.
    fn check(&self, lines: &HashMap<String, usize>) -> Result<()> {
        let at_any = |keys: &[&str], msg: String| Error::Config {
            line: keys.iter().find_map(|k| lines.get(*k).copied()).unwrap_or(0),
            msg,
        };
        let at = |key: &str, msg: String| at_any(&[key], msg);
        if self.batch_size == 0 {
            return Err(at("batch_size", "batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(at("learning_rate", "learning_rate must be finite and >= 0".into()));
        }
        self.weights
            .validate()
            .map_err(|e| at_any(&["lambda", "lambda_phi", "ncc_window"], e.to_string()))?;
        self.schedule()
            .map_err(|e| at_any(&["t_train", "beta_start", "beta_end"], e.to_string()))?;
        self.arch.validate().map_err(|e| {
            let keys = ["channels", "score_widths", "deform_widths", "time_dim", "groups"];
            at_any(&keys, e.to_string())
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check(&HashMap::new())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_train, self.beta_start, self.beta_end)
    }

    /// Canonical text form; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let a = &self.arch;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("lambda", format!("{:?}", w.lambda));
        kv("lambda_phi", format!("{:?}", w.lambda_phi));
        kv("ncc_window", w.ncc_window.to_string());
        kv("t_train", self.t_train.to_string());
        kv("beta_start", format!("{:?}", self.beta_start));
        kv("beta_end", format!("{:?}", self.beta_end));
        kv("seed", self.seed.to_string());
        kv("hflip", self.augment.hflip.to_string());
        kv("vflip", self.augment.vflip.to_string());
        kv("rot90", self.augment.rot90.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("data", self.data.display().to_string());
        kv("output", self.output.display().to_string());
        if let Some(r) = &self.resume {
            kv("resume", r.display().to_string());
        }
        kv("channels", a.channels.to_string());
        kv("score_widths", join(&a.score_widths));
        kv("deform_widths", join(&a.deform_widths));
        kv("time_dim", a.time_dim.to_string());
        kv("attention", a.attention.to_string());
        kv("groups", a.groups.to_string());
        s
    }
}
