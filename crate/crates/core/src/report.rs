//! CSV metric files and the summary statistics printed after evaluation.

use std::io::Write;

use crate::error::{Error, Result};

/// One row of per-epoch classification metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// `train` or `test`.
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

/// One row of per-episode few-shot metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode_id: usize,
    pub ways: usize,
    pub shots: usize,
    pub metric: String,
    pub head: String,
    pub loss: f64,
    pub accuracy: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

pub fn write_epoch_csv<W: Write>(out: W, rows: &[EpochRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "loss", "accuracy"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episode_csv<W: Write>(out: W, rows: &[EpisodeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode_id", "W", "K", "metric", "head", "loss", "accuracy"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.episode_id.to_string(),
            r.ways.to_string(),
            r.shots.to_string(),
            r.metric.clone(),
            r.head.clone(),
            r.loss.to_string(),
            r.accuracy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard error of the mean (sample standard deviation / sqrt(n)).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
