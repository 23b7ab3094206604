//! Run configuration: line-based `key = value` text with `#` comments.
//!
//! The canonical serialization lists every model- and training-relevant key
//! in sorted order, one `key = value` per line. Its SHA-256 is the config
//! fingerprint stamped into checkpoints. Paths are not part of it.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::{Head, Metric};
use crate::gc::GcConfig;
use crate::model::GccnNet;
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    FewShot,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::FewShot => "fewshot",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "fewshot" => Ok(Task::FewShot),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    pub gc: GcConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub head: Head,
    pub metric: Metric,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub train_episodes: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    /// Fraction of classes used for training; the rest are held out.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train: TrainConfig,
    pub episodes: EpisodeConfig,
    /// Output classes of the classification head.
    pub classes: usize,
    /// Fraction of each class held out for classification accuracy.
    pub holdout_fraction: f64,
    pub data: Option<String>,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::FewShot,
            train: TrainConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-3,
                seed: 0,
                precision: Precision::F64,
                gc: GcConfig::default(),
                encoder: EncoderConfig::new((0, 0, 1)),
            },
            episodes: EpisodeConfig {
                head: Head::Prototypical,
                metric: Metric::Euclidean,
                ways: 5,
                shots: 1,
                queries: 5,
                train_episodes: 2000,
                episodes_per_epoch: 100,
                eval_episodes: 200,
                train_fraction: 0.8,
            },
            classes: 0,
            holdout_fraction: 0.2,
            data: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Every key accepted by [`RunConfig::set`], including the path keys.
pub const KEYS: &[&str] = &[
    "batch_size",
    "blocks",
    "classes",
    "collapse",
    "epochs",
    "episodes_per_epoch",
    "eval_episodes",
    "filters",
    "grid_cols",
    "grid_rows",
    "head",
    "holdout_fraction",
    "image_channels",
    "image_height",
    "image_width",
    "layers",
    "learning_rate",
    "metric",
    "mode",
    "optimizer",
    "precision",
    "queries",
    "seed",
    "shots",
    "task",
    "train_episodes",
    "train_fraction",
    "ways",
    "data",
    "out",
];

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.episodes;
        match key {
            "task" => self.task = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "precision" => t.precision = value.parse()?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "blocks" => t.encoder.num_blocks = parse(key, value)?,
            "filters" => t.encoder.filters = parse(key, value)?,
            "image_height" => t.encoder.input.0 = parse(key, value)?,
            "image_width" => t.encoder.input.1 = parse(key, value)?,
            "image_channels" => t.encoder.input.2 = parse(key, value)?,
            "grid_rows" => t.gc.grid_rows = parse(key, value)?,
            "grid_cols" => t.gc.grid_cols = parse(key, value)?,
            "collapse" => t.gc.collapse = value.parse()?,
            "layers" => t.gc.layers = parse(key, value)?,
            "mode" => t.gc.mode = value.parse()?,
            "head" => e.head = value.parse()?,
            "metric" => e.metric = value.parse()?,
            "ways" => e.ways = parse(key, value)?,
            "shots" => e.shots = parse(key, value)?,
            "queries" => e.queries = parse(key, value)?,
            "train_episodes" => e.train_episodes = parse(key, value)?,
            "episodes_per_epoch" => e.episodes_per_epoch = parse(key, value)?,
            "eval_episodes" => e.eval_episodes = parse(key, value)?,
            "train_fraction" => e.train_fraction = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            "data" => self.data = Some(value.to_string()),
            "out" => self.out = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Fingerprinted `(key, value)` pairs, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let e = &self.episodes;
        let mut v: Vec<(&'static str, String)> = vec![
            ("batch_size", t.batch_size.to_string()),
            ("blocks", t.encoder.num_blocks.to_string()),
            ("classes", self.classes.to_string()),
            ("collapse", t.gc.collapse.to_string()),
            ("epochs", t.epochs.to_string()),
            ("episodes_per_epoch", e.episodes_per_epoch.to_string()),
            ("eval_episodes", e.eval_episodes.to_string()),
            ("filters", t.encoder.filters.to_string()),
            ("grid_cols", t.gc.grid_cols.to_string()),
            ("grid_rows", t.gc.grid_rows.to_string()),
            ("head", e.head.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("image_channels", t.encoder.input.2.to_string()),
            ("image_height", t.encoder.input.0.to_string()),
            ("image_width", t.encoder.input.1.to_string()),
            ("layers", t.gc.layers.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("metric", e.metric.to_string()),
            ("mode", t.gc.mode.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("precision", t.precision.to_string()),
            ("queries", e.queries.to_string()),
            ("seed", t.seed.to_string()),
            ("shots", e.shots.to_string()),
            ("task", self.task.to_string()),
            ("train_episodes", e.train_episodes.to_string()),
            ("train_fraction", e.train_fraction.to_string()),
            ("ways", e.ways.to_string()),
        ];
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Canonical text plus the path keys, for logging.
    pub fn resolved(&self) -> String {
        let mut s = self.canonical();
        if let Some(d) = &self.data {
            s.push_str(&format!("data = {d}\n"));
        }
        if let Some(o) = &self.out {
            s.push_str(&format!("out = {o}\n"));
        }
        s
    }

    pub fn net(&self) -> Result<GccnNet> {
        GccnNet::new(self.train.encoder, self.train.gc)
    }

    /// Checks every field; called before any computation.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let e = &self.episodes;
        let positive = [
            ("batch_size", t.batch_size),
            ("filters", t.encoder.filters),
            ("blocks", t.encoder.num_blocks),
            ("image_height", t.encoder.input.0),
            ("image_width", t.encoder.input.1),
            ("image_channels", t.encoder.input.2),
            ("ways", e.ways),
            ("shots", e.shots),
            ("queries", e.queries),
            ("episodes_per_epoch", e.episodes_per_epoch),
            ("eval_episodes", e.eval_episodes),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("`learning_rate` must be positive".into()));
        }
        for (k, v) in [
            ("train_fraction", e.train_fraction),
            ("holdout_fraction", self.holdout_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("`{k}` must be in (0, 1), got {v}")));
            }
        }
        if self.task == Task::Classify && self.classes < 2 {
            return Err(Error::Config("classification needs `classes` >= 2".into()));
        }
        self.net().map(|_| ())
    }
}
