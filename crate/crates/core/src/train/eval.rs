use serde::{Deserialize, Serialize};

use super::{load_image, Sample, SampleRecord, TrainError};
use crate::arch::{argmax_rows, Model};
use crate::condenser::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub path: String,
    pub error: String,
}

/// Binary classification metrics. Class 0 is functional, class 1 defective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_pct: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: [[u64; 2]; 2],
    /// Per class; 0 when the class was never predicted.
    pub precision: [f64; 2],
    /// Per class; 0 when the class never occurs.
    pub recall: [f64; 2],
    pub samples: u64,
    /// Inputs that could not be read; excluded from every metric.
    #[serde(default)]
    pub failures: Vec<EvalFailure>,
}

impl EvalReport {
    pub fn from_predictions(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut confusion = [[0u64; 2]; 2];
        for (actual, predicted) in pairs {
            confusion[actual.min(1)][predicted.min(1)] += 1;
        }
        let samples: u64 = confusion.iter().flatten().sum();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = [0, 1].map(|c| ratio(confusion[c][c], confusion[0][c] + confusion[1][c]));
        let recall = [0, 1].map(|c| ratio(confusion[c][c], confusion[c][0] + confusion[c][1]));
        Self {
            accuracy_pct: 100.0 * ratio(confusion[0][0] + confusion[1][1], samples),
            confusion,
            precision,
            recall,
            samples,
            failures: Vec::new(),
        }
    }
}

/// Batch-1 inference over preprocessed samples.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<EvalReport, TrainError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.forward(&s.input, Exec::Fast)?;
        pairs.push((s.label, argmax_rows(&logits)[0]));
    }
    Ok(EvalReport::from_predictions(pairs))
}

/// Batch-1 inference over manifest records. Unreadable images are logged,
/// skipped and listed in the report.
pub fn evaluate_records(model: &Model<f32>, records: &[SampleRecord]) -> Result<EvalReport, TrainError> {
    let mut pairs = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for r in records {
        match load_image(&r.image_path, model.spec()) {
            Ok(x) => {
                let logits = model.forward(&x, Exec::Fast)?;
                pairs.push((r.class().index(), argmax_rows(&logits)[0]));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", r.image_path.display());
                failures.push(EvalFailure {
                    path: r.image_path.display().to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    let mut report = EvalReport::from_predictions(pairs);
    report.failures = failures;
    Ok(report)
}
