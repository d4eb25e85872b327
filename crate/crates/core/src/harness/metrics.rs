//! Classification metrics and the per-round metrics stream.
//!
//! The stream is JSON lines. The first line is a [`MetricsHeader`] carrying
//! the schema tag and the fully resolved configuration; every further line is
//! one [`RoundMetrics`] record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diig::{predict, Diig, Sample, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::ParamSet;

pub const METRICS_SCHEMA: &str = "fedrel-metrics/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean negative log-likelihood of the true class.
    pub loss: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, macro-F1 and the confusion matrix. A class that is neither
/// present nor predicted contributes an F1 of 0.
pub fn classification_metrics(labels: &[usize], predicted: &[usize], classes: usize) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if labels.len() != predicted.len() {
        return Err(Error::invalid("label and prediction counts differ"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        if y >= classes || p >= classes {
            return Err(Error::InvalidLabel {
                label: y.max(p),
                classes,
            });
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let f1_sum: f64 = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted_c: usize = (0..classes).map(|r| confusion[r][c]).sum();
            let actual_c: usize = confusion[c].iter().sum();
            let denom = (predicted_c + actual_c) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    Ok((correct as f64 / labels.len() as f64, f1_sum / classes as f64, confusion))
}

/// Scores every window of every sample.
pub fn evaluate(model: &Diig, params: &ParamSet, samples: &[Sample]) -> Result<Evaluation> {
    let mut labels = Vec::new();
    let mut predicted = Vec::new();
    let mut nll = 0.0;
    for s in samples {
        for p in predict(model, params, s)? {
            labels.push(s.label);
            predicted.push(p.argmax());
            nll -= p.data()[s.label].max(PROB_FLOOR).ln();
        }
    }
    let (accuracy, macro_f1, confusion) = classification_metrics(&labels, &predicted, model.config.classes)?;
    Ok(Evaluation {
        accuracy,
        macro_f1,
        loss: nll / labels.len() as f64,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: String,
    pub global_loss: f64,
    pub global_acc: f64,
    pub global_macro_f1: f64,
    /// Aggregation weight of each participant this round.
    pub relevance: Vec<f64>,
    /// Wall-clock time of the round; `None` unless timing is enabled, so that
    /// repeated runs produce identical files.
    pub wall_ms: Option<u64>,
}

impl RoundMetrics {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &RoundMetrics) -> bool {
        self.round == other.round
            && self.global_loss.to_bits() == other.global_loss.to_bits()
            && self.global_acc.to_bits() == other.global_acc.to_bits()
            && self.global_macro_f1.to_bits() == other.global_macro_f1.to_bits()
            && self.relevance.len() == other.relevance.len()
            && self
                .relevance
                .iter()
                .zip(&other.relevance)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl MetricsHeader {
    pub fn new(seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(MetricsHeader {
            schema: METRICS_SCHEMA.to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| Error::invalid(format!("config: {e}")))?,
        })
    }
}

/// Appends records to a metrics file, flushing after each line.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, header: &MetricsHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path,
        };
        w.line(header)?;
        Ok(w)
    }

    fn line(&mut self, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string(value).map_err(|e| Error::invalid(format!("metrics: {e}")))?;
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, m: &RoundMetrics) -> Result<()> {
        self.line(m)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<(MetricsHeader, Vec<RoundMetrics>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |n: usize, e: serde_json::Error| Error::MalformedHeader(format!("{}:{n}: {e}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: MetricsHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
    if header.schema != METRICS_SCHEMA {
        return Err(Error::MalformedHeader(format!(
            "unsupported metrics schema `{}`",
            header.schema
        )));
    }
    let mut rounds = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rounds.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?);
    }
    Ok((header, rounds))
}
