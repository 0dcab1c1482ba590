//! CSV outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::InstanceRecord;

/// One line of a metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n: usize,
    pub ablation_flags: String,
    pub seed: u64,
    pub wall_clock_ms: u64,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct InstanceLine {
    index: usize,
    gold: usize,
    prediction: usize,
    correct: bool,
    loss: f64,
    scores: String,
}

pub fn write_instances(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    let lines: Vec<InstanceLine> = records
        .iter()
        .map(|r| InstanceLine {
            index: r.index,
            gold: r.gold,
            prediction: r.prediction,
            correct: r.gold == r.prediction,
            loss: r.loss,
            scores: r.scores.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
        })
        .collect();
    write_rows(path, &lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}
