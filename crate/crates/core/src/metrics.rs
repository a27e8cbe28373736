//! Confusion matrices and accuracy reports.
//!
//! Rows are predicted classes, columns are true classes, so a column sums
//! to the number of validation samples of that class.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{predict_batch, Model, Sample, NUM_CLASSES};

/// Reference validation confusion matrix (rows predicted, columns truth).
pub const REFERENCE_CONFUSION: [[u64; NUM_CLASSES]; NUM_CLASSES] = [
    [482, 24, 5, 0, 1],
    [30, 659, 28, 9, 1],
    [11, 21, 245, 1, 0],
    [3, 0, 4, 42, 0],
    [0, 0, 0, 0, 6],
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, predicted: usize, truth: usize) {
        self.counts[predicted][truth] += 1;
    }

    pub fn column_sums(&self) -> [u64; NUM_CLASSES] {
        let mut s = [0; NUM_CLASSES];
        for row in &self.counts {
            for (c, v) in row.iter().enumerate() {
                s[c] += v;
            }
        }
        s
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, row) in other.counts.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                self.counts[r][c] += v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    /// Diagonal over column sum; `None` for a class with no samples.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub overall: f64,
}

pub fn accuracy_report(cm: &ConfusionMatrix) -> Result<AccuracyReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let cols = cm.column_sums();
    let mut per_class = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if cols[c] > 0 {
            per_class[c] = Some(cm.counts[c][c] as f64 / cols[c] as f64);
        }
    }
    Ok(AccuracyReport {
        per_class,
        overall: cm.trace() as f64 / total as f64,
    })
}

/// Serialized evaluation result. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsJson {
    pub fn new(cm: &ConfusionMatrix, report: &AccuracyReport) -> Self {
        MetricsJson {
            per_class_accuracy: report.per_class.to_vec(),
            overall_accuracy: report.overall,
            confusion: cm.counts.iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::default();
        if self.confusion.len() != NUM_CLASSES || self.confusion.iter().any(|r| r.len() != NUM_CLASSES) {
            return Err(Error::shape("confusion", "expected a 5x5 matrix"));
        }
        for (r, row) in self.confusion.iter().enumerate() {
            cm.counts[r].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a bare `[[..]; 5]` matrix or a metrics JSON object.
pub fn parse_confusion_json(text: &str, origin: &Path) -> Result<ConfusionMatrix> {
    if let Ok(counts) = serde_json::from_str::<[[u64; NUM_CLASSES]; NUM_CLASSES]>(text) {
        return Ok(ConfusionMatrix::new(counts));
    }
    let m: MetricsJson = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
    m.confusion_matrix()
}

/// Confusion grid with per-class accuracy (percent) under each column.
pub fn format_table(cm: &ConfusionMatrix, report: &AccuracyReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>10}", "pred\\true");
    for c in 0..NUM_CLASSES {
        let _ = write!(out, "{c:>9}");
    }
    out.push('\n');
    for (r, row) in cm.counts.iter().enumerate() {
        let _ = write!(out, "{r:>10}");
        for v in row {
            let _ = write!(out, "{v:>9}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:>10}", "Acc (%)");
    for a in &report.per_class {
        match a {
            Some(a) => {
                let _ = write!(out, "{:>9.2}", a * 100.0);
            }
            None => {
                let _ = write!(out, "{:>9}", "-");
            }
        }
    }
    let _ = write!(out, "\noverall accuracy: {:.2}%\n", report.overall * 100.0);
    out
}

/// Confusion matrix of `model` over `samples`. Samples that fail to
/// evaluate are logged and left out.
pub fn evaluate(model: &Model, samples: &[Sample]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for (p, s) in predict_batch(model, samples).into_iter().zip(samples) {
        match p {
            Ok(p) => cm.record(p.predicted_class, s.label),
            Err(e) => warn!("skipping sample in evaluation: {e}"),
        }
    }
    cm
}
